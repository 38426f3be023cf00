use deep_fext::imaging::{count_components, skeletonize};
use deep_fext::map::BinaryMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Union of random discs, rectangles and thick segments on a 48×48 canvas.
pub fn blob_mask(seed: u64) -> BinaryMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 48usize;
    let mut m = BinaryMap::filled(n, n, false);
    for _ in 0..rng.random_range(1..6) {
        let (cy, cx) = (rng.random_range(0..n) as f64, rng.random_range(0..n) as f64);
        match rng.random_range(0..3) {
            0 => {
                let r = rng.random_range(1.0..8.0);
                for y in 0..n {
                    for x in 0..n {
                        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                            m.set(y, x, true);
                        }
                    }
                }
            }
            1 => {
                let (hh, hw) = (rng.random_range(0..6) as f64, rng.random_range(0..12) as f64);
                for y in 0..n {
                    for x in 0..n {
                        if (y as f64 - cy).abs() <= hh && (x as f64 - cx).abs() <= hw {
                            m.set(y, x, true);
                        }
                    }
                }
            }
            _ => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (len, half) = (rng.random_range(5.0..30.0), rng.random_range(0.5..3.5));
                let (dy, dx) = (angle.sin(), angle.cos());
                for y in 0..n {
                    for x in 0..n {
                        let (py, px) = (y as f64 - cy, x as f64 - cx);
                        let along = py * dy + px * dx;
                        let across = (py * dx - px * dy).abs();
                        if along.abs() <= len / 2.0 && across <= half {
                            m.set(y, x, true);
                        }
                    }
                }
            }
        }
    }
    m
}

/// A width-1 skeleton never contains a 2×2 foreground square.
pub fn has_solid_square(m: &BinaryMap) -> bool {
    let (h, w) = m.dims();
    (0..h.saturating_sub(1)).any(|y| {
        (0..w.saturating_sub(1)).any(|x| *m.get(y, x) && *m.get(y + 1, x) && *m.get(y, x + 1) && *m.get(y + 1, x + 1))
    })
}

/// Containment, idempotence, component preservation and unit width.
pub fn check_skeleton(mask: &BinaryMap) -> Result<(), String> {
    let skel = skeletonize(mask);
    if !skel.data().iter().zip(mask.data()).all(|(&s, &m)| !s || m) {
        return Err("skeleton leaves the mask".into());
    }
    if skeletonize(&skel) != skel {
        return Err("thinning is not idempotent".into());
    }
    let (before, after) = (count_components(mask), count_components(&skel));
    if before != after {
        return Err(format!("{before} components became {after}"));
    }
    if has_solid_square(&skel) {
        return Err("skeleton contains a 2×2 block".into());
    }
    Ok(())
}

/// Rows of the thinned 5×50 bar over its middle 40 columns; `Err` unless
/// each column holds exactly one pixel.
pub fn bar_profile() -> Result<Vec<usize>, String> {
    let (h, w) = (15, 60);
    let mut mask = BinaryMap::filled(h, w, false);
    for y in 5..10 {
        for x in 5..55 {
            mask.set(y, x, true);
        }
    }
    let skel = skeletonize(&mask);
    let mut rows = Vec::new();
    for x in 10..50 {
        let column: Vec<usize> = (0..h).filter(|&y| *skel.get(y, x)).collect();
        if column.len() != 1 {
            return Err(format!("column {x} holds {column:?}"));
        }
        rows.push(column[0]);
    }
    Ok(rows)
}
