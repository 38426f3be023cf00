//! Brute-force pixel-score oracles over random probability maps.

use deep_fext::map::{BinaryMap, RealMap};
use deep_fext::metrics::{average_max_dice, cohens_kappa, confusion, dice_curve, max_dice, precision_recall_f1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 16;

pub struct Instance {
    pub prob: RealMap,
    pub gt: BinaryMap,
    pub fov: Option<BinaryMap>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density: f64 = rng.random_range(0.05..0.6);
    let gt: Vec<bool> = (0..N * N).map(|_| rng.random_bool(density)).collect();
    // Mix continuous values with values sitting exactly on grid thresholds.
    let prob: Vec<f32> = (0..N * N)
        .map(|_| match rng.random_range(0..3) {
            0 => rng.random_range(0..=100) as f32 / 100.0,
            _ => rng.random::<f32>(),
        })
        .collect();
    let fov = seed
        .is_multiple_of(2)
        .then(|| BinaryMap::from_vec(N, N, (0..N * N).map(|_| rng.random_bool(0.8)).collect()).unwrap());
    Instance { prob: RealMap::from_vec(N, N, prob).unwrap(), gt: BinaryMap::from_vec(N, N, gt).unwrap(), fov }
}

/// Pixels inside the FOV as `(probability, truth)` pairs.
pub fn pixels(inst: &Instance) -> Vec<(f64, bool)> {
    (0..N * N)
        .filter(|&i| inst.fov.as_ref().is_none_or(|f| f.data()[i]))
        .map(|i| (inst.prob.data()[i] as f64, inst.gt.data()[i]))
        .collect()
}

pub fn oracle_counts(px: &[(f64, bool)], t: f64) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for &(p, g) in px {
        match (p >= t, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

pub fn oracle_dice(px: &[(f64, bool)], t: f64) -> f64 {
    let (tp, fp, fn_, _) = oracle_counts(px, t);
    if 2 * tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn oracle_prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn oracle_kappa(tp: u64, fp: u64, fn_: u64, tn: u64) -> f64 {
    let n = (tp + fp + fn_ + tn) as f64;
    let po = (tp + tn) as f64 / n;
    let pe = ((tp + fp) as f64 * (tp + fn_) as f64 + (fn_ + tn) as f64 * (fp + tn) as f64) / (n * n);
    if pe >= 1.0 {
        if po >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    }
}

/// Compares every score on instance `seed` with the oracles above.
pub fn check_instance(seed: u64) -> Result<(), String> {
    let inst = instance(seed);
    let px = pixels(&inst);
    let t = 0.5;
    let (tp, fp, fn_, tn) = oracle_counts(&px, t);
    let c = confusion(&inst.prob.threshold(t as f32), &inst.gt, inst.fov.as_ref()).map_err(|e| e.to_string())?;
    if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) || c.total() as usize != px.len() {
        return Err(format!("seed {seed}: confusion {c:?}, oracle {:?}", (tp, fp, fn_, tn)));
    }
    let close = |what: &str, a: f64, b: f64| {
        if (a - b).abs() < 1e-9 {
            Ok(())
        } else {
            Err(format!("seed {seed}: {what} {a} vs oracle {b}"))
        }
    };
    let (p, r, f) = precision_recall_f1(c);
    let (op, or, of) = oracle_prf(tp, fp, fn_);
    close("precision", p, op)?;
    close("recall", r, or)?;
    close("f1", f, of)?;
    close("kappa", cohens_kappa(c).map_err(|e| e.to_string())?, oracle_kappa(tp, fp, fn_, tn))?;

    let curve = dice_curve(&inst.prob, &inst.gt, inst.fov.as_ref()).map_err(|e| e.to_string())?;
    for k in 1..=99 {
        close(&format!("dice at {k}/100"), curve[k - 1], oracle_dice(&px, k as f64 / 100.0))?;
    }
    let best = (1..=99).map(|k| oracle_dice(&px, k as f64 / 100.0)).fold(f64::MIN, f64::max);
    let (got, at) = max_dice(&inst.prob, &inst.gt, inst.fov.as_ref()).map_err(|e| e.to_string())?;
    close("max dice", got, best)?;
    close("dice at the reported threshold", oracle_dice(&px, at), best)
}

/// Mean of per-image maximum Dice against the brute-force average over `seeds`.
pub fn check_average_max_dice(seeds: std::ops::Range<u64>) -> Result<(), String> {
    let insts: Vec<Instance> = seeds.map(instance).collect();
    let probs: Vec<RealMap> = insts.iter().map(|i| i.prob.clone()).collect();
    let gts: Vec<BinaryMap> = insts.iter().map(|i| i.gt.clone()).collect();
    let fovs: Vec<Option<BinaryMap>> = insts.iter().map(|i| i.fov.clone()).collect();
    let (avg, thresholds) = average_max_dice(&probs, &gts, Some(&fovs)).map_err(|e| e.to_string())?;
    let expected: f64 = insts
        .iter()
        .map(|i| {
            let px = pixels(i);
            (1..=99).map(|k| oracle_dice(&px, k as f64 / 100.0)).fold(f64::MIN, f64::max)
        })
        .sum::<f64>()
        / insts.len() as f64;
    if (avg - expected).abs() >= 1e-9 || thresholds.len() != insts.len() {
        return Err(format!("average max dice {avg} vs oracle {expected}"));
    }
    Ok(())
}
