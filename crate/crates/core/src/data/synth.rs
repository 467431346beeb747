//! Procedural two-domain corpus: classes are shapes, domains differ only in
//! rendering style (gray on white vs. tinted on a textured background).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{load_image_folder, DomainDataset};
use crate::error::{Error, Result};
use crate::rng;

pub const SYNTH_VERSION: u32 = 1;
pub const SHAPES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_per_class: 50,
            n_classes: 4,
            image_size: 32,
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: &'a str,
    generator_version: u32,
    #[serde(flatten)]
    config: SynthConfig,
    classes: &'a [&'a str],
    domains: [&'a str; 2],
}

#[derive(Clone, Copy)]
enum Domain {
    Source,
    Target,
}

/// Random placement of one shape, in pixel units.
struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

/// Whether the point `(u, v)` in shape-local unit coordinates is inside.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    match SHAPES[shape] {
        "disk" => u * u + v * v <= 1.0,
        "square" => u.abs().max(v.abs()) <= 0.8,
        "triangle" => {
            // equilateral, circumradius 1, apex at v = -1, base at v = 0.5
            (-1.0..=0.5).contains(&v) && u.abs() <= (v + 1.0) / 1.5 * 3f64.sqrt() / 2.0
        }
        "cross" => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        "ring" => {
            let r2 = u * u + v * v;
            (0.4..=1.0).contains(&r2)
        }
        "bar" => u.abs() <= 1.0 && v.abs() <= 0.3,
        _ => unreachable!(),
    }
}

/// Fraction of a pixel covered by the shape, 4×4 supersampled.
fn coverage(shape: usize, p: &Placement, x: usize, y: usize) -> f64 {
    let (s, c) = p.angle.sin_cos();
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let px = x as f64 + (sx as f64 + 0.5) / 4.0 - p.cx;
            let py = y as f64 + (sy as f64 + 0.5) / 4.0 - p.cy;
            let u = (c * px + s * py) / p.radius;
            let v = (-s * px + c * py) / p.radius;
            if inside(shape, u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn render(shape: usize, domain: Domain, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let sz = size as f64;
    let p = Placement {
        cx: rng.gen_range(0.38..0.62) * sz,
        cy: rng.gen_range(0.38..0.62) * sz,
        radius: rng.gen_range(0.22..0.32) * sz,
        angle: rng.gen_range(0.0..2.0 * PI),
    };
    let (fg, stripe) = match domain {
        Domain::Source => {
            let g = rng.gen_range(0.0..0.35);
            ([g, g, g], None)
        }
        Domain::Target => {
            let j = rng.gen_range(-0.05..0.05);
            let fg = [0.95 + j * 0.5, 0.62 + j, 0.18 + j];
            let freq = rng.gen_range(0.45..0.75);
            let theta = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (fg, Some((freq, theta, phase)))
        }
    };
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let bg = match stripe {
                None => [1.0, 1.0, 1.0],
                Some((freq, theta, phase)) => {
                    let t = freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase;
                    let wave = 0.5 + 0.5 * t.sin();
                    let noise = rng.gen_range(-0.06..0.06);
                    [
                        0.08 + 0.12 * wave + noise,
                        0.30 + 0.25 * wave + noise,
                        0.38 + 0.30 * wave + noise,
                    ]
                }
            };
            let a = coverage(shape, &p, x, y);
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = a * fg[c] + (1.0 - a) * bg[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Writes `out/source/<class>/*.png`, `out/target/<class>/*.png` and
/// `out/provenance.json`, then loads both trees.
pub fn make_synthetic_corpus(cfg: &SynthConfig, out: &Path) -> Result<(DomainDataset, DomainDataset)> {
    if cfg.n_classes < 2 || cfg.n_classes > SHAPES.len() {
        return Err(Error::Validation(format!(
            "n_classes must be in [2, {}], got {}",
            SHAPES.len(),
            cfg.n_classes
        )));
    }
    if cfg.n_per_class < 4 {
        return Err(Error::Validation(format!("n_per_class must be at least 4, got {}", cfg.n_per_class)));
    }
    if cfg.image_size < 8 {
        return Err(Error::Validation(format!("image_size must be at least 8, got {}", cfg.image_size)));
    }
    let classes = &SHAPES[..cfg.n_classes];
    for (d, (name, domain)) in [("source", Domain::Source), ("target", Domain::Target)].into_iter().enumerate() {
        for (ci, class) in classes.iter().enumerate() {
            let dir = out.join(name).join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::path(&dir, e))?;
            let mut rng = rng::stream(cfg.seed, rng::SYNTH + ((d as u64) << 8) + ((ci as u64) << 16));
            for i in 0..cfg.n_per_class {
                let path = dir.join(format!("{class}_{i:04}.png"));
                render(ci, domain, cfg.image_size, &mut rng)
                    .save(&path)
                    .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
            }
        }
    }
    let prov = Provenance {
        generator: "osuda-synth",
        generator_version: SYNTH_VERSION,
        config: *cfg,
        classes,
        domains: ["source", "target"],
    };
    let path = out.join("provenance.json");
    let text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::path(&path, e))?;
    Ok((load_image_folder(out.join("source"))?, load_image_folder(out.join("target"))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_have_distinct_masks() {
        let p = Placement {
            cx: 16.0,
            cy: 16.0,
            radius: 10.0,
            angle: 0.0,
        };
        let masks: Vec<Vec<bool>> = (0..SHAPES.len())
            .map(|s| (0..32 * 32).map(|i| coverage(s, &p, i % 32, i / 32) > 0.5).collect())
            .collect();
        for a in 0..masks.len() {
            assert!(masks[a].iter().any(|&m| m), "{} is empty", SHAPES[a]);
            for b in a + 1..masks.len() {
                assert_ne!(masks[a], masks[b], "{} == {}", SHAPES[a], SHAPES[b]);
            }
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SynthConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(make_synthetic_corpus(&bad, dir.path()).is_err());
        let bad = SynthConfig {
            n_per_class: 3,
            ..Default::default()
        };
        assert!(make_synthetic_corpus(&bad, dir.path()).is_err());
    }
}
