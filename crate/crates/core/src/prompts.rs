//! Candidate point extraction from connected regions and prompt selection.
//!
//! Each kept region of a map is sampled along `n_segments − 1` interior
//! lines across its longer side; on every line the middle run of set pixels
//! supplies one candidate. Candidates of all regions of a map are pooled and
//! up to three prompts are drawn: one uniformly at random, then the pool
//! member farthest from it, then the member farthest from both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imgproc::{BinaryMask, BoundingBox};
use crate::{Error, Result};

/// Default number of segments each region's long side is split into.
pub const DEFAULT_SEGMENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PromptLabel {
    Negative,
    Positive,
}

impl From<PromptLabel> for u8 {
    fn from(l: PromptLabel) -> u8 {
        match l {
            PromptLabel::Negative => 0,
            PromptLabel::Positive => 1,
        }
    }
}

impl TryFrom<u8> for PromptLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(PromptLabel::Negative),
            1 => Ok(PromptLabel::Positive),
            other => Err(format!("prompt label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    pub label: PromptLabel,
}

impl PointPrompt {
    pub fn new(x: usize, y: usize, label: PromptLabel) -> Self {
        Self { x, y, label }
    }
}

/// Candidate points sampled from one region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionPointSet {
    pub region: usize,
    pub points: Vec<(usize, usize)>,
}

/// Central index of every maximal run of nonzero entries, in order.
pub fn find_centers(line: &[u8]) -> Vec<usize> {
    let mut centers = Vec::new();
    let mut run_start = None;
    for (i, &v) in line.iter().chain(std::iter::once(&0)).enumerate() {
        match (v != 0, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                centers.push(start + (i - start) / 2);
                run_start = None;
            }
            _ => {}
        }
    }
    centers
}

/// Samples candidate points of one region whose bounding box is `bbox`.
///
/// For a wide box the columns `x + i·(w / n)` for `i in 1..n` are scanned
/// over the box rows, otherwise rows `y + i·(h / n)` over the box columns.
/// On each line the middle entry of [`find_centers`] becomes a candidate;
/// empty lines contribute nothing, and a step of zero yields no candidates.
pub fn extract_region_points(
    map: &BinaryMask,
    bbox: &BoundingBox,
    n_segments: usize,
    region: usize,
) -> Result<RegionPointSet> {
    if n_segments < 2 {
        return Err(Error::InvalidArgument(format!("n_segments must be at least 2, got {n_segments}")));
    }
    let mut set = RegionPointSet { region, points: Vec::new() };
    if bbox.is_empty() {
        return Ok(set);
    }
    let b = bbox.clamp_to(map.width(), map.height());
    if b.is_empty() {
        return Ok(set);
    }
    if b.w > b.h {
        let step = b.w / n_segments;
        if step == 0 {
            return Ok(set);
        }
        for i in 1..n_segments {
            let col = b.x + i * step;
            let line: Vec<u8> = (b.y..b.bottom()).map(|y| map.get(col, y) as u8).collect();
            let centers = find_centers(&line);
            if let Some(&c) = centers.get(centers.len() / 2) {
                set.points.push((col, b.y + c));
            }
        }
    } else {
        let step = b.h / n_segments;
        if step == 0 {
            return Ok(set);
        }
        for i in 1..n_segments {
            let row = b.y + i * step;
            let line: Vec<u8> = (b.x..b.right()).map(|x| map.get(x, row) as u8).collect();
            let centers = find_centers(&line);
            if let Some(&c) = centers.get(centers.len() / 2) {
                set.points.push((b.x + c, row));
            }
        }
    }
    Ok(set)
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dx = a.0 as i64 - b.0 as i64;
    let dy = a.1 as i64 - b.1 as i64;
    (dx * dx + dy * dy) as u64
}

/// Picks up to `points_per_map` prompts from the pooled candidates.
///
/// The first prompt is a uniform draw from the pool; each further prompt is
/// the not-yet-chosen candidate maximising its minimum Euclidean distance to
/// the prompts already chosen (for the second prompt: the distance to the
/// first). Ties resolve to the earliest candidate in region order.
pub fn select_prompts<R: Rng + ?Sized>(
    candidates: &[RegionPointSet],
    points_per_map: usize,
    label: PromptLabel,
    rng: &mut R,
) -> Result<Vec<PointPrompt>> {
    if !(1..=3).contains(&points_per_map) {
        return Err(Error::InvalidArgument(format!("points_per_map must be 1, 2 or 3, got {points_per_map}")));
    }
    let pool: Vec<(usize, usize)> = candidates.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let mut chosen = vec![rng.random_range(0..pool.len())];
    while chosen.len() < points_per_map.min(pool.len()) {
        let mut best: Option<(usize, u64)> = None;
        for (i, &p) in pool.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist2(p, pool[c])).min().unwrap_or(0);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => chosen.push(i),
            None => break,
        }
    }
    Ok(chosen.into_iter().map(|i| PointPrompt::new(pool[i].0, pool[i].1, label)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centers_hand_traces() {
        assert_eq!(find_centers(&[0, 1, 1, 1, 0, 0, 1, 0]), vec![2, 6]);
        assert_eq!(find_centers(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(find_centers(&[1, 1, 1, 1, 1]), vec![2]);
        assert_eq!(find_centers(&[1, 1, 0, 1, 1, 1, 1]), vec![1, 5]);
        assert_eq!(find_centers(&[]), Vec::<usize>::new());
    }

    #[test]
    fn wide_rectangle_samples_columns() {
        let map = BinaryMask::from_fn(20, 10, |x, y| (5..13).contains(&x) && (3..5).contains(&y));
        let set = extract_region_points(&map, &BoundingBox::new(5, 3, 8, 2), 4, 0).unwrap();
        assert_eq!(set.points, vec![(7, 4), (9, 4), (11, 4)]);
    }

    #[test]
    fn tall_rectangle_samples_rows() {
        let map = BinaryMask::from_fn(10, 20, |x, y| (3..5).contains(&x) && (5..13).contains(&y));
        let set = extract_region_points(&map, &BoundingBox::new(3, 5, 2, 8), 4, 0).unwrap();
        assert_eq!(set.points, vec![(4, 7), (4, 9), (4, 11)]);
    }

    #[test]
    fn single_pixel_has_no_candidates() {
        let map = BinaryMask::from_fn(5, 5, |x, y| x == 2 && y == 2);
        let set = extract_region_points(&map, &BoundingBox::new(2, 2, 1, 1), 4, 0).unwrap();
        assert!(set.points.is_empty());
        let set = extract_region_points(&map, &BoundingBox::new(2, 2, 0, 1), 4, 0).unwrap();
        assert!(set.points.is_empty());
        assert!(extract_region_points(&map, &BoundingBox::new(2, 2, 1, 1), 1, 0).is_err());
    }

    #[test]
    fn selection_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = [RegionPointSet { region: 0, points: vec![(5, 5)] }];
        let p = select_prompts(&sets, 1, PromptLabel::Positive, &mut rng).unwrap();
        assert_eq!(p, vec![PointPrompt::new(5, 5, PromptLabel::Positive)]);
        let p = select_prompts(&sets, 3, PromptLabel::Positive, &mut rng).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn second_point_is_farthest_from_first() {
        let sets = [RegionPointSet { region: 0, points: vec![(0, 0), (3, 4), (10, 0)] }];
        // find a seed whose first draw is (0, 0)
        let seed = (0..100u64).find(|&s| ChaCha8Rng::seed_from_u64(s).random_range(0..3usize) == 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = select_prompts(&sets, 2, PromptLabel::Negative, &mut rng).unwrap();
        assert_eq!((p[0].x, p[0].y), (0, 0));
        assert_eq!((p[1].x, p[1].y), (10, 0));
        assert!(p.iter().all(|q| q.label == PromptLabel::Negative));
    }

    #[test]
    fn selection_is_seed_deterministic() {
        let sets = [
            RegionPointSet { region: 0, points: vec![(1, 2), (3, 9), (7, 7)] },
            RegionPointSet { region: 1, points: vec![(20, 4), (15, 15)] },
        ];
        let a = select_prompts(&sets, 3, PromptLabel::Positive, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = select_prompts(&sets, 3, PromptLabel::Positive, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn empty_pool_and_bad_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_prompts(&[], 2, PromptLabel::Positive, &mut rng).unwrap().is_empty());
        assert!(select_prompts(&[], 4, PromptLabel::Positive, &mut rng).is_err());
        assert!(select_prompts(&[], 0, PromptLabel::Positive, &mut rng).is_err());
    }

    #[test]
    fn label_serializes_as_integer() {
        let p = PointPrompt::new(1, 2, PromptLabel::Positive);
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"x":1,"y":2,"label":1}"#);
        assert!(serde_json::from_str::<PointPrompt>(r#"{"x":1,"y":2,"label":3}"#).is_err());
    }
}
