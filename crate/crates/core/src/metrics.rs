//! Dice similarity and 95th-percentile symmetric surface distance.
//!
//! Conventions:
//! * DSC of two empty masks is 1.
//! * HD95 of two empty masks is 0; when exactly one is empty it is the image
//!   diagonal `sqrt(h^2 + w^2)`.
//! * HD95 pools the directed boundary distances of both directions and takes
//!   the 95th percentile with linear interpolation between order statistics.
//! * Reports average foreground classes only; a class absent from both the
//!   prediction and the ground truth of a case is left out of that case.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch, Case};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::segnet::{load_checkpoint, SegNet};
use crate::tensor::{Mode, Scalar};

fn same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(
            op,
            &[a.h, a.w],
            &[b.h, b.w],
            "masks must have the same size",
        ));
    }
    Ok(())
}

/// `2|P and G| / (|P| + |G|)` for one class; 1 when both are empty.
pub fn dsc(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (in_p, in_g) = (a == class, b == class);
        p += in_p as usize;
        g += in_g as usize;
        both += (in_p && in_g) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Foreground pixels of `class` with a non-foreground 8-neighbour or on the
/// image border, as `(y, x)` in row-major order.
pub fn boundary(mask: &Mask, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != class {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let exposed = edge
                || (y - 1..=y + 1).any(|ny| (x - 1..=x + 1).any(|nx| mask.get(ny, nx) != class));
            if exposed {
                out.push((y, x));
            }
        }
    }
    out
}

/// Lower envelope of the parabolas `(x - q)^2 + f[q]` over the finite `f[q]`,
/// evaluated at every `x`. Intersections are compared as exact fractions, so
/// the result is the exact integer minimum.
fn envelope(f: &[Option<i64>], out: &mut [Option<i64>]) {
    let mut sites: Vec<usize> = Vec::new();
    // Left end of each site's interval as numerator/denominator; the first is unbounded.
    let mut starts: Vec<(i64, i64)> = Vec::new();
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        let qi = q as i64;
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                starts.push((0, 0));
                break;
            };
            let (pi, fp) = (p as i64, f[p].expect("sites are finite"));
            let (num, den) = (fq + qi * qi - fp - pi * pi, 2 * (qi - pi));
            let (zn, zd) = *starts.last().expect("parallel to sites");
            if sites.len() > 1 && num * zd <= zn * den {
                sites.pop();
                starts.pop();
                continue;
            }
            sites.push(q);
            starts.push((num, den));
            break;
        }
    }
    if sites.is_empty() {
        out.fill(None);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xi = x as i64;
        while k + 1 < sites.len() && starts[k + 1].0 < xi * starts[k + 1].1 {
            k += 1;
        }
        let d = xi - sites[k] as i64;
        *o = Some(d * d + f[sites[k]].expect("sites are finite"));
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
/// `None` everywhere when there are no seeds.
pub fn squared_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<Option<i64>> {
    let mut grid = vec![None; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = Some(0);
    }
    let (mut col, mut tmp) = (vec![None; h], vec![None; h]);
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![None; w];
    for y in 0..h {
        envelope(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Linear-interpolation percentile of `values`, `q` in `[0, 1]`; sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    match values.get(lo + 1) {
        Some(&next) if frac > 0.0 => values[lo] + frac * (next - values[lo]),
        _ => values[lo],
    }
}

fn empty_mask_distance(pred: &Mask, pb: &[(usize, usize)], gb: &[(usize, usize)]) -> Option<f64> {
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => Some(((pred.h * pred.h + pred.w * pred.w) as f64).sqrt()),
        _ => None,
    }
}

/// 95th percentile of the pooled symmetric boundary distances, in pixels.
pub fn hd95(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    same_shape("hd95", pred, gt)?;
    let (pb, gb) = (boundary(pred, class), boundary(gt, class));
    if let Some(d) = empty_mask_distance(pred, &pb, &gb) {
        return Ok(d);
    }
    let (h, w) = (pred.h, pred.w);
    let to_g = squared_distance_map(h, w, &gb);
    let to_p = squared_distance_map(h, w, &pb);
    let mut dists: Vec<f64> = pb
        .iter()
        .map(|&(y, x)| to_g[y * w + x])
        .chain(gb.iter().map(|&(y, x)| to_p[y * w + x]))
        .map(|d| (d.expect("other boundary is non-empty") as f64).sqrt())
        .collect();
    Ok(percentile(&mut dists, 0.95))
}

/// All-pairs reference for [`hd95`], quadratic in the boundary sizes.
pub fn hd95_brute_force(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    same_shape("hd95", pred, gt)?;
    let (pb, gb) = (boundary(pred, class), boundary(gt, class));
    if let Some(d) = empty_mask_distance(pred, &pb, &gb) {
        return Ok(d);
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| {
                        let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut dists = directed(&pb, &gb);
    dists.extend(directed(&gb, &pb));
    Ok(percentile(&mut dists, 0.95))
}

/// Anything that maps cases to label maps. Implementations must only look at
/// the images; the masks are there for stubs and diagnostics.
pub trait Predictor {
    fn predict(&mut self, cases: &[&Case]) -> Result<Vec<Mask>>;
}

impl<T: Scalar> Predictor for SegNet<T> {
    fn predict(&mut self, cases: &[&Case]) -> Result<Vec<Mask>> {
        let items: Vec<(&[f32], &Mask)> = cases
            .iter()
            .map(|c| (c.image.as_slice(), &c.mask))
            .collect();
        let (x, _) = batch::<T>(&items)?;
        let logits = self.logits(&x, Mode::Eval)?;
        Ok(crate::mask::argmax_channels(&logits))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_dsc: f64,
    pub mean_hd95: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n_cases: usize,
}

impl EvalReport {
    pub fn per_class_dsc(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.dsc).collect()
    }

    pub fn per_class_hd95(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.hd95).collect()
    }
}

/// Cases handed to the predictor at once.
pub const EVAL_BATCH: usize = 8;

/// Per-case metrics of every foreground class present in `pred` or `gt`.
pub fn case_metrics(pred: &Mask, gt: &Mask, n_classes: usize) -> Result<Vec<Option<(f64, f64)>>> {
    same_shape("case_metrics", pred, gt)?;
    (1..n_classes)
        .map(|c| {
            let c = c as u8;
            if !pred.contains(c) && !gt.contains(c) {
                return Ok(None);
            }
            Ok(Some((dsc(pred, gt, c)?, hd95(pred, gt, c)?)))
        })
        .collect()
}

/// Averages per-case metrics into a report. A case without any present
/// class counts as perfect, and so does a class never present anywhere.
pub fn aggregate(per_case: &[Vec<Option<(f64, f64)>>], n_classes: usize) -> EvalReport {
    let mean = |v: &[f64], empty: f64| {
        if v.is_empty() {
            empty
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (mut case_dsc, mut case_hd) = (Vec::new(), Vec::new());
    let mut by_class: Vec<(Vec<f64>, Vec<f64>)> =
        vec![(Vec::new(), Vec::new()); n_classes.saturating_sub(1)];
    for case in per_case {
        let present: Vec<(f64, f64)> = case.iter().flatten().copied().collect();
        case_dsc.push(mean(&present.iter().map(|p| p.0).collect::<Vec<_>>(), 1.0));
        case_hd.push(mean(&present.iter().map(|p| p.1).collect::<Vec<_>>(), 0.0));
        for (slot, m) in by_class.iter_mut().zip(case) {
            if let Some((d, h)) = m {
                slot.0.push(*d);
                slot.1.push(*h);
            }
        }
    }
    EvalReport {
        mean_dsc: mean(&case_dsc, 1.0),
        mean_hd95: mean(&case_hd, 0.0),
        per_class: by_class
            .iter()
            .enumerate()
            .map(|(i, (d, h))| ClassMetrics {
                class: i + 1,
                dsc: mean(d, 1.0),
                hd95: mean(h, 0.0),
            })
            .collect(),
        n_cases: per_case.len(),
    }
}

/// Runs `predictor` over `cases` in batches and scores it against their masks.
pub fn evaluate(
    predictor: &mut dyn Predictor,
    cases: &[Case],
    n_classes: usize,
) -> Result<EvalReport> {
    let mut per_case = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EVAL_BATCH) {
        let refs: Vec<&Case> = chunk.iter().collect();
        let preds = predictor.predict(&refs)?;
        if preds.len() != chunk.len() {
            return Err(Error::Data(format!(
                "predictor returned {} masks for {} cases",
                preds.len(),
                chunk.len()
            )));
        }
        for (pred, case) in preds.iter().zip(chunk) {
            per_case.push(case_metrics(pred, &case.mask, n_classes)?);
        }
    }
    Ok(aggregate(&per_case, n_classes))
}

/// Loads a checkpoint of either dtype and evaluates it on `cases`.
pub fn evaluate_checkpoint(path: &Path, cases: &[Case], n_classes: usize) -> Result<EvalReport> {
    if !path.is_file() {
        return Err(Error::Data(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    match load_checkpoint::<f32>(path) {
        Ok(mut net) => evaluate(&mut net, cases, n_classes),
        Err(first) => match load_checkpoint::<f64>(path) {
            Ok(mut net) => evaluate(&mut net, cases, n_classes),
            Err(_) => Err(first),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(h, w, 0);
        for &(y, x) in ones {
            m.labels[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn dsc_fixtures() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        let b = mask(4, 4, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (3, 2), (3, 3)]);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(
            dsc(&Mask::filled(4, 4, 0), &Mask::filled(4, 4, 0), 1).unwrap(),
            1.0
        );
    }

    #[test]
    fn shape_mismatch_is_a_shape_error() {
        let (a, b) = (Mask::filled(4, 4, 0), Mask::filled(4, 5, 0));
        assert!(matches!(dsc(&a, &b, 1), Err(Error::Shape(_))));
        assert!(matches!(hd95(&a, &b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn hd95_fixtures() {
        let a = mask(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3), (4, 4)]);
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);
        let (p, g) = (mask(5, 5, &[(0, 0)]), mask(5, 5, &[(3, 4)]));
        assert_eq!(hd95(&p, &g, 1).unwrap(), 5.0);
        let empty = Mask::filled(3, 4, 0);
        assert_eq!(hd95(&empty, &empty, 1).unwrap(), 0.0);
        assert_eq!(hd95(&mask(3, 4, &[(1, 1)]), &empty, 1).unwrap(), 5.0);
    }

    #[test]
    fn boundary_uses_eight_connectivity_and_the_border() {
        let mut m = Mask::filled(5, 5, 0);
        for y in 0..5 {
            for x in 0..5 {
                if (1..4).contains(&y) && (1..4).contains(&x) || y == 0 {
                    m.labels[y * 5 + x] = 1;
                }
            }
        }
        let b = boundary(&m, 1);
        // Row 0 lies on the border. The block centre and the pixel below row 0's
        // middle have no background neighbour.
        assert!(b.contains(&(0, 2)));
        assert!(!b.contains(&(2, 2)) && !b.contains(&(1, 2)));
        assert!(b.contains(&(1, 1)));
        assert_eq!(b.len(), 5 + 7);
        let diag = mask(
            3,
            3,
            &[
                (0, 0),
                (0, 1),
                (0, 2),
                (1, 0),
                (1, 1),
                (1, 2),
                (2, 0),
                (2, 1),
            ],
        );
        assert!(
            boundary(&diag, 1).contains(&(1, 1)),
            "a missing diagonal neighbour exposes the pixel"
        );
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&mut [3.0, 1.0, 2.0], 0.5), 2.0);
        let mut v: Vec<f64> = (0..21).map(f64::from).collect();
        assert_eq!(percentile(&mut v, 0.95), 19.0);
        assert!((percentile(&mut [0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&mut [4.0], 0.95), 4.0);
    }

    fn random_mask(rng: &mut SplitMix64, h: usize, w: usize, density: f64) -> Mask {
        let labels = (0..h * w).map(|_| rng.gen_bool(density) as u8).collect();
        Mask::new(h, w, labels).unwrap()
    }

    #[test]
    fn hd95_matches_brute_force_on_random_masks() {
        let mut rng = SplitMix64::seed_from_u64(11);
        for i in 0..200 {
            let density = [0.02, 0.1, 0.3, 0.6][i % 4];
            let (p, g) = (
                random_mask(&mut rng, 16, 16, density),
                random_mask(&mut rng, 16, 16, density),
            );
            assert_eq!(
                hd95(&p, &g, 1).unwrap(),
                hd95_brute_force(&p, &g, 1).unwrap(),
                "pair {i}"
            );
        }
    }

    #[test]
    fn distance_map_is_exact() {
        let mut rng = SplitMix64::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let seeds: Vec<(usize, usize)> = (0..rng.gen_range(1..6))
                .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
                .collect();
            let map = squared_distance_map(h, w, &seeds);
            for y in 0..h {
                for x in 0..w {
                    let best = seeds
                        .iter()
                        .map(|&(v, u)| (y as i64 - v as i64).pow(2) + (x as i64 - u as i64).pow(2))
                        .min();
                    assert_eq!(map[y * w + x], best);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let (p, g) = (random_mask(&mut rng, h, w, 0.3), random_mask(&mut rng, h, w, 0.3));
            prop_assert_eq!(dsc(&p, &g, 1).unwrap(), dsc(&g, &p, 1).unwrap());
            prop_assert_eq!(hd95(&p, &g, 1).unwrap(), hd95(&g, &p, 1).unwrap());
        }

        #[test]
        fn dsc_ignores_a_shared_pixel_permutation(seed in any::<u64>()) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let (p, g) = (random_mask(&mut rng, 6, 6, 0.4), random_mask(&mut rng, 6, 6, 0.4));
            let mut perm: Vec<usize> = (0..36).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let shuffle = |m: &Mask| Mask::new(6, 6, perm.iter().map(|&i| m.labels[i]).collect()).unwrap();
            prop_assert_eq!(dsc(&p, &g, 1).unwrap(), dsc(&shuffle(&p), &shuffle(&g), 1).unwrap());
        }
    }

    struct Echo;

    impl Predictor for Echo {
        fn predict(&mut self, cases: &[&Case]) -> Result<Vec<Mask>> {
            Ok(cases.iter().map(|c| c.mask.clone()).collect())
        }
    }

    struct Background;

    impl Predictor for Background {
        fn predict(&mut self, cases: &[&Case]) -> Result<Vec<Mask>> {
            Ok(cases
                .iter()
                .map(|c| Mask::filled(c.mask.h, c.mask.w, 0))
                .collect())
        }
    }

    fn case(id: &str, m: Mask) -> Case {
        Case {
            id: id.into(),
            image: vec![0.0; m.h * m.w],
            mask: m,
        }
    }

    #[test]
    fn perfect_and_background_predictors() {
        let mut labels = vec![0u8; 64];
        labels[9] = 1;
        labels[50] = 2;
        let cases: Vec<Case> = (0..11)
            .map(|i| case(&format!("c{i}"), Mask::new(8, 8, labels.clone()).unwrap()))
            .collect();
        let r = evaluate(&mut Echo, &cases, 3).unwrap();
        assert_eq!((r.mean_dsc, r.mean_hd95, r.n_cases), (1.0, 0.0, 11));
        let r = evaluate(&mut Background, &cases, 3).unwrap();
        assert_eq!(r.per_class_dsc(), vec![0.0, 0.0]);
        assert_eq!(r.mean_dsc, 0.0);
        assert!((r.mean_hd95 - 128f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_case_fixture_is_hand_averaged() {
        // Case a: class 1 has |P| = |G| = 2 sharing one pixel (DSC 0.5),
        // boundary distances {0, 1, 1, 0} pool to HD95 1; class 2 is absent.
        // Case b: class 2 predicted perfectly; class 1 missed entirely, so
        // DSC 0 and the diagonal sqrt(32) for HD95.
        let gt_a = Mask::new(4, 4, [vec![1, 1], vec![0; 14]].concat()).unwrap();
        let pr_a = Mask::new(4, 4, [vec![0, 1, 1], vec![0; 13]].concat()).unwrap();
        let gt_b = Mask::new(4, 4, [vec![2, 0, 0, 0, 1], vec![0; 11]].concat()).unwrap();
        let pr_b = Mask::new(4, 4, [vec![2], vec![0; 15]].concat()).unwrap();
        let a = case_metrics(&pr_a, &gt_a, 3).unwrap();
        let b = case_metrics(&pr_b, &gt_b, 3).unwrap();
        assert_eq!(a, vec![Some((0.5, 1.0)), None]);
        assert_eq!(b, vec![Some((0.0, 32f64.sqrt())), Some((1.0, 0.0))]);
        let r = aggregate(&[a, b], 3);
        assert_eq!(r.mean_dsc, (0.5 + 0.5) / 2.0);
        assert_eq!(r.mean_hd95, (1.0 + 32f64.sqrt() / 2.0) / 2.0);
        assert_eq!(
            r.per_class[0],
            ClassMetrics {
                class: 1,
                dsc: 0.25,
                hd95: (1.0 + 32f64.sqrt()) / 2.0
            }
        );
        assert_eq!(
            r.per_class[1],
            ClassMetrics {
                class: 2,
                dsc: 1.0,
                hd95: 0.0
            }
        );
        let json = serde_json::to_value(&r).unwrap();
        for key in ["mean_dsc", "mean_hd95", "per_class", "n_cases"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
