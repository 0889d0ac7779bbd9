//! Procedural content images and the ground-truth stylizer.
//!
//! Colours are built in an opponent-colour plane: `a = R - (G+B)/2`,
//! `b = (sqrt 3 / 2)(G - B)`, grey level `g = (R+G+B)/3`. Hue is the angle of
//! `(a, b)` and a style's hue shift is a rotation of that plane.

use std::f64::consts::{PI, TAU};

use clast_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Hue band that content colours are drawn from, as (centre, half-width).
pub const CONTENT_HUE: (f64, f64) = (0.5, 0.3);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub hue: f64,
    pub contrast: f64,
    pub orientation: f64,
    pub frequency: f64,
    pub amplitude: f64,
}

impl StyleParams {
    pub const IDENTITY: StyleParams = StyleParams {
        hue: 0.0,
        contrast: 1.0,
        orientation: 0.0,
        frequency: 0.0,
        amplitude: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClass {
    /// `None` for the reserved unstyled class.
    pub id: Option<usize>,
    pub name: String,
    pub params: StyleParams,
}

impl StyleClass {
    pub const NULL_NAME: &'static str = "photo";

    pub fn null() -> Self {
        StyleClass {
            id: None,
            name: Self::NULL_NAME.into(),
            params: StyleParams::IDENTITY,
        }
    }

    pub fn is_null(&self) -> bool {
        self.id.is_none()
    }

    pub fn class_name(id: usize) -> String {
        format!("style-{id}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Content,
    Painting,
    Stylized,
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    pub role: Role,
    pub class_id: Option<usize>,
    pub content_id: usize,
}

impl ImageSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2])
    }
}

pub fn opponent_to_rgb(g: f64, a: f64, b: f64) -> [f64; 3] {
    [g + 2.0 * a / 3.0, g - a / 3.0 + b / SQRT3, g - a / 3.0 - b / SQRT3]
}

pub fn rgb_to_opponent(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    ((r + g + b) / 3.0, r - (g + b) / 2.0, SQRT3 / 2.0 * (g - b))
}

/// Rounds to the nearest 8-bit level so in-memory pixels match their PNG.
pub fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn content_colour(rng: &mut RngStream, chroma: (f64, f64)) -> [f64; 3] {
    let (centre, half) = CONTENT_HUE;
    let hue = rng.uniform_range(centre - half, centre + half);
    let rho = rng.uniform_range(chroma.0, chroma.1);
    let grey = rng.uniform_range(0.3, 0.7);
    opponent_to_rgb(grey, rho * hue.cos(), rho * hue.sin()).map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let (d0, d1, d2) = (side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    fn random(rng: &mut RngStream) -> Shape {
        let cx = rng.uniform_range(0.1, 0.9);
        let cy = rng.uniform_range(0.1, 0.9);
        let r = rng.uniform_range(0.08, 0.25);
        match rng.below(3) {
            0 => Shape::Circle { cx, cy, r },
            1 => {
                let aspect = rng.uniform_range(0.5, 1.5);
                let (hw, hh) = (r * aspect, r / aspect);
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => {
                let rot = rng.uniform_range(0.0, TAU);
                let p = [0.0, 1.0, 2.0].map(|k: f64| {
                    let ang = rot + k * TAU / 3.0 + rng.uniform_range(-0.4, 0.4);
                    (cx + r * ang.cos(), cy + r * ang.sin())
                });
                Shape::Triangle { p }
            }
        }
    }
}

/// Gradient background with 3 to 8 coloured shapes, quantised to 8 bits.
pub fn render_content(rng: &mut RngStream, size: usize) -> Tensor {
    let c0 = content_colour(rng, (0.02, 0.1));
    let c1 = content_colour(rng, (0.02, 0.1));
    let dir = rng.uniform_range(0.0, TAU);
    let count = 3 + rng.below(6);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| (Shape::random(rng), content_colour(rng, (0.1, 0.3))))
        .collect();

    let hw = size * size;
    let mut px = vec![0.0; 3 * hw];
    for i in 0..size {
        for j in 0..size {
            let (u, v) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            let t = ((u - 0.5) * dir.cos() + (v - 0.5) * dir.sin() + 0.5).clamp(0.0, 1.0);
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                rgb[k] = c0[k] * (1.0 - t) + c1[k] * t;
            }
            for (shape, colour) in &shapes {
                if shape.contains(u, v) {
                    rgb = *colour;
                }
            }
            for k in 0..3 {
                px[k * hw + i * size + j] = quantize(rgb[k]);
            }
        }
    }
    Tensor::new(px, &[3, size, size]).expect("shape matches data")
}

/// Draws `classes` distinct style parameter sets.
///
/// Hues are stratified around the circle with jitter; contrast and texture
/// orientation are stratified over their ranges through independent random
/// permutations, so no two classes share any of the three.
pub fn draw_class_params(rng: &mut RngStream, classes: usize) -> Vec<StyleParams> {
    let c = classes as f64;
    let mut contrast_rank: Vec<usize> = (0..classes).collect();
    let mut orient_rank: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut contrast_rank);
    rng.shuffle(&mut orient_rank);
    (0..classes)
        .map(|k| {
            let jitter = rng.uniform_range(-0.25, 0.25);
            let frequency = rng.uniform_range(3.0, 7.0);
            let amplitude = rng.uniform_range(0.06, 0.14);
            StyleParams {
                hue: TAU * (k as f64 + 0.5 + jitter) / c,
                contrast: 0.55 + 1.05 * (contrast_rank[k] as f64 + 0.5) / c,
                orientation: PI * (orient_rank[k] as f64 + 0.5) / c,
                frequency,
                amplitude,
            }
        })
        .collect()
}

/// Applies a style class to `[3, H, W]` pixels at the given strength.
///
/// Hue rotation, contrast about mid-grey, then an additive oriented sinusoid;
/// the result is clamped to `[0, 1]`. The null class and zero strength return
/// the input unchanged.
pub fn apply_style_pixels(pixels: &Tensor, params: &StyleParams, strength: f64) -> Tensor {
    if strength == 0.0 || *params == StyleParams::IDENTITY {
        return pixels.clone();
    }
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let hw = h * w;
    let src = pixels.data();
    let (sin_t, cos_t) = (strength * params.hue).sin_cos();
    let gamma = 1.0 + strength * (params.contrast - 1.0);
    let amp = strength * params.amplitude;
    let (sin_p, cos_p) = params.orientation.sin_cos();
    let mut out = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let (g, a, b) = rgb_to_opponent([src[p], src[hw + p], src[2 * hw + p]]);
            let (a2, b2) = (a * cos_t - b * sin_t, a * sin_t + b * cos_t);
            let rgb = opponent_to_rgb(g, a2, b2);
            let (u, v) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let tex = amp * (TAU * params.frequency * (cos_p * u + sin_p * v)).sin();
            for k in 0..3 {
                out[k * hw + p] = (0.5 + gamma * (rgb[k] - 0.5) + tex).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(out, pixels.shape()).expect("shape preserved")
}

pub fn apply_style(img: &ImageSample, class: &StyleClass, strength: f64) -> ImageSample {
    ImageSample {
        pixels: apply_style_pixels(&img.pixels, &class.params, strength),
        role: if class.is_null() { img.role } else { Role::Painting },
        class_id: class.id,
        content_id: img.content_id,
    }
}
