use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = vqa_balance::cli::Cli::parse();
    match vqa_balance::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
