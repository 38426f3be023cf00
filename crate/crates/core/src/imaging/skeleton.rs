//! Two-subiteration parallel thinning for centerline extraction.
//!
//! Each subiteration first marks every pixel satisfying the classical
//! neighbourhood conditions, then deletes the marked pixels in raster order,
//! re-checking each one against the already-thinned image: a pixel is only
//! removed while it keeps at least two foreground neighbours that remain
//! 8-connected among themselves. That re-check keeps 2-pixel-thick structures
//! (which plain parallel deletion erases) and preserves the number of
//! 8-connected components.

use crate::map::BinaryMap;

/// Neighbours `P2..P9`, clockwise from north, as `(dy, dx)`.
const RING: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn neighbours(mask: &BinaryMap, y: usize, x: usize) -> [bool; 8] {
    let (h, w) = mask.dims();
    let mut out = [false; 8];
    for (slot, &(dy, dx)) in out.iter_mut().zip(&RING) {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        *slot = ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && *mask.get(ny as usize, nx as usize);
    }
    out
}

/// Number of `0 → 1` transitions around the ring.
fn transitions(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

/// Number of 8-connected groups formed by the foreground ring pixels alone.
fn ring_components(n: &[bool; 8]) -> usize {
    let mut seen = [false; 8];
    let mut groups = 0;
    for start in 0..8 {
        if !n[start] || seen[start] {
            continue;
        }
        groups += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..8 {
                if n[j] && !seen[j] {
                    let (a, b) = (RING[i], RING[j]);
                    if (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    groups
}

fn marked(n: &[bool; 8], second: bool) -> bool {
    let b = n.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) || transitions(n) != 1 {
        return false;
    }
    let [p2, _, p4, _, p6, _, p8, _] = *n;
    if second {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    } else {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    }
}

fn still_removable(n: &[bool; 8]) -> bool {
    n.iter().filter(|&&v| v).count() >= 2 && ring_components(n) == 1
}

/// Thins every foreground component to a one-pixel-wide skeleton.
pub fn skeletonize(mask: &BinaryMap) -> BinaryMap {
    let mut out = mask.clone();
    let (h, w) = out.dims();
    loop {
        let mut changed = false;
        for second in [false, true] {
            let candidates: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| *out.get(y, x) && marked(&neighbours(&out, y, x), second))
                .collect();
            for (y, x) in candidates {
                if still_removable(&neighbours(&out, y, x)) {
                    out.set(y, x, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &BinaryMap) -> usize {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in RING {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.data()[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}
