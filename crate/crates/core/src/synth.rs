//! Deterministic vessel-like phantoms for smoke tests and demos.
//!
//! A phantom is a reddish background with a gentle illumination gradient,
//! crossed by straight bars and circular arcs of width 3 to 7. Vessels are
//! darker, most strongly in the green channel, as in fundus photographs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::dataset::LabeledImage;
use crate::imaging::raster::{encode_image, save_mask};
use crate::map::BinaryMap;
use crate::tensor::Tensor;

const BACKGROUND: [f32; 3] = [0.78, 0.42, 0.22];
const VESSEL: [f32; 3] = [0.52, 0.14, 0.10];
const NOISE: f32 = 0.02;

enum Stroke {
    Bar { a: (f32, f32), b: (f32, f32), half: f32 },
    Arc { centre: (f32, f32), radius: f32, start: f32, sweep: f32, half: f32 },
}

impl Stroke {
    fn covers(&self, y: f32, x: f32) -> bool {
        match *self {
            Stroke::Bar { a, b, half } => {
                let (dy, dx) = (b.0 - a.0, b.1 - a.1);
                let len2 = dy * dy + dx * dx;
                let t = (((y - a.0) * dy + (x - a.1) * dx) / len2).clamp(0.0, 1.0);
                let (py, px) = (a.0 + t * dy - y, a.1 + t * dx - x);
                py * py + px * px <= half * half
            }
            Stroke::Arc { centre, radius, start, sweep, half } => {
                let (dy, dx) = (y - centre.0, x - centre.1);
                let angle = (dy.atan2(dx) - start).rem_euclid(std::f32::consts::TAU);
                angle <= sweep && ((dy * dy + dx * dx).sqrt() - radius).abs() <= half
            }
        }
    }
}

/// Odd widths only, so every stroke has a well-defined centre pixel.
fn half_width<R: Rng>(rng: &mut R) -> f32 {
    [3.0f32, 5.0, 7.0][rng.random_range(0..3)] / 2.0
}

/// One `size × size` phantom with `bars` straight segments and `arcs` arcs.
pub fn vessel_phantom(size: usize, bars: usize, arcs: usize, seed: u64) -> Result<LabeledImage> {
    if size < 16 {
        return Err(Error::Config(format!("phantom size {size} is below 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let mut strokes = Vec::with_capacity(bars + arcs);
    for _ in 0..bars {
        let a = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let b = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        strokes.push(Stroke::Bar { a, b, half: half_width(&mut rng) });
    }
    for _ in 0..arcs {
        strokes.push(Stroke::Arc {
            centre: (rng.random_range(0.0..s), rng.random_range(0.0..s)),
            radius: rng.random_range(0.2 * s..0.6 * s),
            start: rng.random_range(0.0..std::f32::consts::TAU),
            sweep: rng.random_range(1.0..3.0),
            half: half_width(&mut rng),
        });
    }
    let mut mask = BinaryMap::filled(size, size, false);
    let mut image = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let on = strokes.iter().any(|st| st.covers(y as f32, x as f32));
            mask.set(y, x, on);
            let light = 0.9 + 0.1 * (x + y) as f32 / (2.0 * s);
            let base = if on { VESSEL } else { BACKGROUND };
            for (c, &v) in base.iter().enumerate() {
                let noisy = v * light + rng.random_range(-NOISE..NOISE);
                image[(c * size + y) * size + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    LabeledImage::new(format!("phantom{seed}"), Tensor::new(&[1, 3, size, size], image)?, mask, None, None)
}

/// The smoke-test phantom: 128×128, four bars and three arcs.
pub fn smoke_phantom(seed: u64) -> Result<LabeledImage> {
    vessel_phantom(128, 4, 3, seed)
}

/// Centred disc covering most of a `size × size` frame, like a fundus FOV.
pub fn circular_fov(size: usize) -> BinaryMap {
    let c = (size as f32 - 1.0) / 2.0;
    let r = 0.47 * size as f32;
    let mut m = BinaryMap::filled(size, size, false);
    for y in 0..size {
        for x in 0..size {
            m.set(y, x, (y as f32 - c).powi(2) + (x as f32 - c).powi(2) <= r * r);
        }
    }
    m
}

fn write_item(item: &LabeledImage, image: &Path, mask: &Path) -> Result<()> {
    encode_image(image, &item.image)?;
    save_mask(mask, &item.vessel_mask)
}

/// Writes 40 phantoms in the DRIVE layout (ids 21–40 train, 01–20 test) with
/// circular FOV masks; pixels outside the FOV are black.
pub fn write_drive_layout(root: &Path, size: usize, seed: u64) -> Result<()> {
    let fov = circular_fov(size);
    for (sub, role, ids) in [("training", "training", 21..=40), ("test", "test", 1..=20)] {
        let base = root.join(sub);
        for n in ids {
            let mut item = vessel_phantom(size, 4, 3, seed + n)?;
            let hw = size * size;
            for (p, &inside) in fov.data().iter().enumerate() {
                if !inside {
                    for c in 0..3 {
                        item.image.values_mut()[c * hw + p] = 0.0;
                    }
                    item.vessel_mask.data_mut()[p] = false;
                }
            }
            let id = format!("{n:02}");
            write_item(
                &item,
                &base.join("images").join(format!("{id}_{role}.png")),
                &base.join("1st_manual").join(format!("{id}_manual1.png")),
            )?;
            save_mask(base.join("mask").join(format!("{id}_{role}_mask.png")), &fov)?;
        }
    }
    Ok(())
}

/// Writes `train` and `test` phantoms in the custom layout, as
/// `train/{images,masks}/phantomN.png` and `test/{images,masks}/phantomN.png`.
pub fn write_custom_layout(root: &Path, train: usize, test: usize, size: usize, seed: u64) -> Result<()> {
    for (k, (sub, count)) in [("train", train), ("test", test)].into_iter().enumerate() {
        for i in 0..count {
            let item = vessel_phantom(size, 4, 3, seed + (k * train + i) as u64)?;
            let name = format!("{}.png", item.id);
            write_item(&item, &root.join(sub).join("images").join(&name), &root.join(sub).join("masks").join(&name))?;
        }
    }
    Ok(())
}
