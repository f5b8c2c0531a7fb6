use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Domain, DomainStyle, ImageSample, CLASS_BACKGROUND, CLASS_CIRCLE, CLASS_RECTANGLE, CLASS_STRIPE, CLASS_TRIANGLE};

type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Circle { cx: f64, cy: f64, r: f64, color: Rgb },
    Rect { x0: f64, y0: f64, w: f64, h: f64, color: Rgb },
    Triangle { pts: [(f64, f64); 3], color: Rgb },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => CLASS_CIRCLE,
            Shape::Rect { .. } => CLASS_RECTANGLE,
            Shape::Triangle { .. } => CLASS_TRIANGLE,
        }
    }

    fn color(&self) -> Rgb {
        match self {
            Shape::Circle { color, .. } | Shape::Rect { color, .. } | Shape::Triangle { color, .. } => *color,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r, .. } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, w, h, .. } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Triangle { pts, .. } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Geometry and base colors of a scene, independent of domain style.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub background: Rgb,
    /// Vertical brightness ramp of the background, top to bottom.
    pub ramp: f64,
    pub stripe_top: f64,
    pub stripe_height: f64,
    pub stripe_color: Rgb,
    pub shapes: Vec<Shape>,
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f64) -> Rgb {
    base.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Axis-aligned bounds `(x0, y0, x1, y1)`.
type Bounds = (f64, f64, f64, f64);

fn overlaps(a: Bounds, b: Bounds) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

fn sample_shape(rng: &mut ChaCha8Rng, size: f64) -> (Shape, Bounds) {
    let kind = rng.gen_range(0..3);
    match kind {
        0 => {
            let r = rng.gen_range(0.09..0.2) * size;
            let cx = rng.gen_range(r..size - r);
            let cy = rng.gen_range(r..size - r);
            let color = jitter(rng, [0.85, 0.3, 0.25], 0.12);
            (Shape::Circle { cx, cy, r, color }, (cx - r, cy - r, cx + r, cy + r))
        }
        1 => {
            let w = rng.gen_range(0.15..0.4) * size;
            let h = rng.gen_range(0.15..0.4) * size;
            let x0 = rng.gen_range(0.0..size - w);
            let y0 = rng.gen_range(0.0..size - h);
            let color = jitter(rng, [0.25, 0.35, 0.8], 0.12);
            (Shape::Rect { x0, y0, w, h, color }, (x0, y0, x0 + w, y0 + h))
        }
        _ => {
            let w = rng.gen_range(0.2..0.42) * size;
            let h = rng.gen_range(0.2..0.42) * size;
            let x0 = rng.gen_range(0.0..size - w);
            let y0 = rng.gen_range(0.0..size - h);
            let apex = x0 + rng.gen_range(0.2..0.8) * w;
            let pts = [(apex, y0), (x0 + w, y0 + h), (x0, y0 + h)];
            let color = jitter(rng, [0.75, 0.35, 0.7], 0.12);
            (Shape::Triangle { pts, color }, (x0, y0, x0 + w, y0 + h))
        }
    }
}

impl SceneLayout {
    pub fn sample(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let background = jitter(&mut rng, [0.58, 0.66, 0.55], 0.1);
        let ramp = rng.gen_range(-0.15..0.15);
        let stripe_height = rng.gen_range(0.08..0.16) * s;
        let stripe_top = rng.gen_range(0.05 * s..0.95 * s - stripe_height);
        let stripe_color = jitter(&mut rng, [0.9, 0.8, 0.3], 0.1);

        let wanted = rng.gen_range(1..=3);
        let mut shapes = Vec::with_capacity(wanted);
        let mut taken: Vec<Bounds> = Vec::with_capacity(wanted);
        for _ in 0..40 {
            if shapes.len() == wanted {
                break;
            }
            let (shape, bounds) = sample_shape(&mut rng, s);
            if taken.iter().all(|&b| !overlaps(b, bounds)) {
                taken.push(bounds);
                shapes.push(shape);
            }
        }
        SceneLayout {
            background,
            ramp,
            stripe_top,
            stripe_height,
            stripe_color,
            shapes,
        }
    }
}

/// Rasterizes a layout (pixel centres) into linear `[0, 1]` RGB and labels.
pub fn render_layout(layout: &SceneLayout, size: usize) -> (Vec<Rgb>, Vec<u8>) {
    let mut rgb = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for py in 0..size {
        let y = py as f64 + 0.5;
        for px in 0..size {
            let x = px as f64 + 0.5;
            let mut class = CLASS_BACKGROUND;
            let shade = layout.ramp * (y / size as f64 - 0.5);
            let mut color = layout.background.map(|v| v + shade);
            if y >= layout.stripe_top && y < layout.stripe_top + layout.stripe_height {
                class = CLASS_STRIPE;
                color = layout.stripe_color;
            }
            if let Some(shape) = layout.shapes.iter().find(|s| s.contains(x, y)) {
                class = shape.class();
                // darker towards the bottom-right, so shapes are not flat fills
                let t = (x + y) / (2.0 * size as f64) - 0.5;
                color = shape.color().map(|v| v - 0.12 * t);
            }
            rgb.push(color.map(|v| v.clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    (rgb, labels)
}

fn box_blur(img: &[Rgb], size: usize) -> Vec<Rgb> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, size as isize - 1) as usize;
        let cy = y.clamp(0, size as isize - 1) as usize;
        img[cy * size + cx]
    };
    let mut out = Vec::with_capacity(img.len());
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = [0.0; 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(x + dx, y + dy);
                    for c in 0..3 {
                        acc[c] += v[c];
                    }
                }
            }
            out.push(acc.map(|v| v / 9.0));
        }
    }
    out
}

/// Applies gain/offset, optional 3×3 box blur, Gaussian noise and saturation
/// scaling, then quantizes to 8 bits.
fn apply_style(img: Vec<Rgb>, style: &DomainStyle, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut img: Vec<Rgb> = img
        .into_iter()
        .map(|p| std::array::from_fn(|c| p[c] * style.gain[c] + style.offset[c]))
        .collect();
    if style.blur {
        img = box_blur(&img, size);
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).unwrap();
        for p in &mut img {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    let mut out = Vec::with_capacity(img.len() * 3);
    for p in img {
        let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for v in p {
            let s = gray + style.saturation * (v - gray);
            out.push((s.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Renders the scene of `seed` in the given style. The returned sample carries
/// id 0 and the source tag; callers stamp the real id and domain.
pub fn generate_scene(seed: u64, style: &DomainStyle, size: usize) -> ImageSample {
    let layout = SceneLayout::sample(seed, size);
    let (img, labels) = render_layout(&layout, size);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let rgb = apply_style(img, style, size, &mut noise_rng);
    ImageSample {
        sample_id: 0,
        domain: Domain::Source,
        height: size,
        width: size,
        rgb,
        labels,
    }
}
