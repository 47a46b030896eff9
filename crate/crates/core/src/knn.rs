//! Exact k-nearest-neighbor retrieval under ℓ2 distance.
//!
//! Two query paths share one distance routine: [`Index::query_exhaustive`]
//! scans every point, and [`Index::query`] walks points in order of their
//! projection onto the leading principal axis, stopping once the projection gap
//! alone exceeds the current k-th distance. Projection gaps never exceed true
//! distances, so both paths return the same list, ordered by
//! `(distance, image_id)`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{DataStore, ImageRecord, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query_image_id: String,
    pub neighbors: Vec<(String, f64)>,
}

impl NeighborList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Index {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    lookup: BTreeMap<String, usize>,
    /// Point indices sorted by projection.
    order: Vec<usize>,
    /// Position of each point inside `order`.
    rank: Vec<usize>,
    proj: Vec<f64>,
    slack: f64,
}

const POWER_ITERATIONS: usize = 16;

pub fn build_index<'a, I>(images: I) -> Result<Index>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    let mut lookup = BTreeMap::new();
    for img in images {
        let d = img.features.dim();
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DimensionMismatch {
                    id: img.image_id.clone(),
                    expected,
                    got: d,
                })
            }
            _ => {}
        }
        if lookup.insert(img.image_id.clone(), ids.len()).is_some() {
            return Err(Error::Duplicate(img.image_id.clone()));
        }
        ids.push(img.image_id.clone());
        data.extend_from_slice(&img.features.values);
    }
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewImages(n));
    }
    let dim = dim.unwrap_or(0);

    let axis = principal_axis(&data, n, dim);
    let proj: Vec<f64> = (0..n).map(|i| dot(&data[i * dim..(i + 1) * dim], &axis)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    let scale = proj.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    Ok(Index {
        ids,
        dim,
        data,
        lookup,
        order,
        rank,
        proj,
        slack: 1e-9 * (1.0 + scale),
    })
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn resolve(&self, image_id: &str, k: usize) -> Result<usize> {
        let q = *self.lookup.get(image_id).ok_or_else(|| Error::Unknown {
            kind: "image",
            id: image_id.to_string(),
        })?;
        if k == 0 || k > self.len() - 1 {
            return Err(Error::KTooLarge {
                k,
                available: self.len() - 1,
            });
        }
        Ok(q)
    }

    fn finish(&self, image_id: &str, best: Vec<(f64, usize)>) -> NeighborList {
        NeighborList {
            query_image_id: image_id.to_string(),
            neighbors: best.into_iter().map(|(d, i)| (self.ids[i].clone(), d)).collect(),
        }
    }

    /// Reference path: distance to every other point, then sort.
    pub fn query_exhaustive(&self, image_id: &str, k: usize) -> Result<NeighborList> {
        let q = self.resolve(image_id, k)?;
        let qp = self.point(q);
        let mut all: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != q)
            .map(|j| (sq_distance(qp, self.point(j), f64::INFINITY).expect("unbounded"), j))
            .map(|(s, j)| (libm::sqrt(s), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| self.cmp_entry(a, b);
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        Ok(self.finish(image_id, all))
    }

    /// Exact query with projection pruning and partial-distance abandonment.
    pub fn query(&self, image_id: &str, k: usize) -> Result<NeighborList> {
        let q = self.resolve(image_id, k)?;
        let qp = self.point(q);
        let qproj = self.proj[q];
        let pos = self.rank[q];
        let n = self.len();

        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let mut lo = pos;
        let mut hi = pos + 1;
        loop {
            let gap_lo = (lo > 0).then(|| qproj - self.proj[self.order[lo - 1]]);
            let gap_hi = (hi < n).then(|| self.proj[self.order[hi]] - qproj);
            let (j, gap) = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(g), None) => {
                    lo -= 1;
                    (self.order[lo], g)
                }
                (None, Some(g)) => {
                    hi += 1;
                    (self.order[hi - 1], g)
                }
                (Some(gl), Some(gh)) => {
                    if gl <= gh {
                        lo -= 1;
                        (self.order[lo], gl)
                    } else {
                        hi += 1;
                        (self.order[hi - 1], gh)
                    }
                }
            };
            let full = best.len() == k;
            let kth = if full { best[k - 1].0 } else { f64::INFINITY };
            // Both frontiers are at least this far away in projection, so nothing left can qualify.
            if full && gap > kth + self.slack {
                break;
            }
            let bound = if full { kth * kth * (1.0 + 1e-12) + 1e-300 } else { f64::INFINITY };
            let Some(sq) = sq_distance(qp, self.point(j), bound) else {
                continue;
            };
            let entry = (libm::sqrt(sq), j);
            if full && self.cmp_entry(&entry, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let at = best
                .binary_search_by(|e| self.cmp_entry(e, &entry))
                .unwrap_or_else(|i| i);
            best.insert(at, entry);
            best.truncate(k);
        }
        Ok(self.finish(image_id, best))
    }

    fn cmp_entry(&self, a: &(f64, usize), b: &(f64, usize)) -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
    }
}

/// Squared distance summed in index order; `None` once the running sum exceeds `bound`.
fn sq_distance(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = x - y;
            acc += d * d;
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading eigenvector of the centered covariance by power iteration.
/// Any unit vector keeps the search exact; this one just prunes best.
fn principal_axis(data: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + i as f64 / dim.max(1) as f64).collect();
    normalize(&mut v);
    let mut centered = vec![0.0; dim];
    for _ in 0..POWER_ITERATIONS {
        let mut next = vec![0.0; dim];
        for i in 0..n {
            for ((c, x), m) in centered.iter_mut().zip(&data[i * dim..(i + 1) * dim]).zip(&mean) {
                *c = x - m;
            }
            let s = dot(&centered, &v);
            for (nx, c) in next.iter_mut().zip(&centered) {
                *nx += s * c;
            }
        }
        if !normalize(&mut next) {
            break;
        }
        v = next;
    }
    v
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = libm::sqrt(dot(v, v));
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Neighbor lists for every image, searching only within the image's own split.
/// `k` is clamped to the split size minus one; splits with fewer than two images are skipped.
pub fn neighbor_table(store: &DataStore, k: usize) -> Result<BTreeMap<String, NeighborList>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let members: Vec<&ImageRecord> = store.images().filter(|i| i.split == split).collect();
        if members.len() < 2 {
            continue;
        }
        let index = build_index(members.iter().copied())?;
        let k_eff = k.min(index.len() - 1);
        for img in &members {
            out.insert(img.image_id.clone(), index.query(&img.image_id, k_eff)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureVector;

    fn img(id: &str, v: &[f64]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            features: FeatureVector::raw(v.to_vec()),
            split: Split::Train,
            display_uri: None,
        }
    }

    #[test]
    fn hand_geometry() {
        let imgs = [img("a", &[0.0, 0.0]), img("b", &[1.0, 0.0]), img("c", &[3.0, 0.0])];
        let idx = build_index(&imgs).unwrap();
        let nl = idx.query("a", 2).unwrap();
        assert_eq!(nl.neighbors, vec![("b".to_string(), 1.0), ("c".to_string(), 3.0)]);
        assert_eq!(idx.query_exhaustive("a", 2).unwrap(), nl);
    }

    #[test]
    fn ties_ordered_by_id() {
        let imgs = [img("a", &[0.0, 0.0]), img("c", &[-1.0, 0.0]), img("b", &[1.0, 0.0])];
        let idx = build_index(&imgs).unwrap();
        let ids: Vec<_> = idx.query("a", 2).unwrap().ids().map(String::from).collect();
        assert_eq!(ids, ["b", "c"]);
    }

    #[test]
    fn minimal_and_error_cases() {
        assert!(build_index(&[img("a", &[0.0]), img("b", &[1.0])]).is_ok());
        assert_eq!(build_index(&[img("a", &[0.0])]).unwrap_err(), Error::TooFewImages(1));
        let err = build_index(&[img("a", &[0.0]), img("b", &[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let idx = build_index(&[img("a", &[0.0]), img("b", &[1.0])]).unwrap();
        assert!(matches!(idx.query("zz", 1), Err(Error::Unknown { .. })));
        assert!(matches!(idx.query("a", 2), Err(Error::KTooLarge { k: 2, available: 1 })));
        assert!(matches!(idx.query("a", 0), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn identical_points_fall_back_to_id_order() {
        let imgs: Vec<_> = ["e", "d", "c", "b", "a"].iter().map(|id| img(id, &[1.0, 1.0])).collect();
        let idx = build_index(&imgs).unwrap();
        let ids: Vec<_> = idx.query("c", 4).unwrap().ids().map(String::from).collect();
        assert_eq!(ids, ["a", "b", "d", "e"]);
    }
}
