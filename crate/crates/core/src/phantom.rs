//! Procedural ultrasound-like phantoms.
//!
//! A scene is a set of tissue ellipses inside a convex-probe imaging fan.
//! It rasterizes to a semantic map and renders to B-mode-like images in two
//! styles: a clean "simulated" look and a "real" look with a wider point
//! spread, gamma compression, depth attenuation and reverberation bands.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::types::{Image, SemanticMap};

pub const MIN_SCENE_SIDE: usize = 32;
pub const DEFAULT_TISSUE_CLASSES: u8 = 6;

/// Convex-probe field of view in size-relative units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanGeometry {
    /// Apex position as fractions of (width, height); y may be negative (above the image).
    pub apex: [f64; 2],
    pub opening_deg: f64,
    /// Outer radius as a fraction of the image height.
    pub depth_frac: f64,
    /// Inner (probe surface) radius as a fraction of the image height.
    pub inner_frac: f64,
}

impl FanGeometry {
    pub fn sim_default() -> Self {
        Self { apex: [0.5, -0.15], opening_deg: 70.0, depth_frac: 1.1, inner_frac: 0.2 }
    }

    pub fn real_default() -> Self {
        Self { apex: [0.5, -0.05], opening_deg: 60.0, depth_frac: 1.0, inner_frac: 0.12 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.opening_deg > 10.0 && self.opening_deg <= 90.0) {
            return Err(Error::InvalidArgument(format!(
                "fan opening angle must lie in (10, 90] degrees, got {}",
                self.opening_deg
            )));
        }
        if !(self.depth_frac > self.inner_frac && self.inner_frac >= 0.0) {
            return Err(Error::InvalidArgument("fan depth must exceed its inner radius".into()));
        }
        Ok(())
    }
}

/// Fan geometry resolved to pixel units for one image size.
#[derive(Clone, Copy, Debug)]
struct Fan {
    ax: f64,
    ay: f64,
    half_angle: f64,
    r_min: f64,
    r_max: f64,
}

impl Fan {
    fn new(g: &FanGeometry, height: usize, width: usize) -> Self {
        Self {
            ax: g.apex[0] * width as f64,
            ay: g.apex[1] * height as f64,
            half_angle: g.opening_deg.to_radians() / 2.0,
            r_min: g.inner_frac * height as f64,
            r_max: g.depth_frac * height as f64,
        }
    }

    /// Polar coordinates (radius, angle from the downward axis) of a point.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.ax, y - self.ay);
        ((dx * dx + dy * dy).sqrt(), dx.atan2(dy))
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (r, a) = self.polar(x, y);
        a.abs() <= self.half_angle && r >= self.r_min && r <= self.r_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center in pixels (x, y).
    pub center: [f64; 2],
    /// Semi-axes in pixels.
    pub axes: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    pub class_id: u8,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = (dx * c + dy * s) / self.axes[0];
        let v = (-dx * s + dy * c) / self.axes[1];
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.axes[0] * self.axes[1]
    }

    /// Ray parameter at which a ray from `origin` along unit `dir` leaves the ellipse.
    fn exit_distance(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        let (s, c) = self.angle.sin_cos();
        let (ox, oy) = (origin.0 - self.center[0], origin.1 - self.center[1]);
        let ou = (ox * c + oy * s) / self.axes[0];
        let ov = (-ox * s + oy * c) / self.axes[1];
        let du = (dir.0 * c + dir.1 * s) / self.axes[0];
        let dv = (-dir.0 * s + dir.1 * c) / self.axes[1];
        let a = du * du + dv * dv;
        let b = 2.0 * (ou * du + ov * dv);
        let cc = ou * ou + ov * ov - 1.0;
        let disc = b * b - 4.0 * a * cc;
        if disc <= 0.0 {
            return None;
        }
        let t_exit = (-b + disc.sqrt()) / (2.0 * a);
        (t_exit > 0.0).then_some(t_exit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Tissue classes in the palette; labels span `0..=num_tissue_classes`.
    pub num_tissue_classes: u8,
    pub fan: FanGeometry,
    /// Painted in order; later ellipses overwrite earlier ones.
    pub ellipses: Vec<Ellipse>,
}

impl PhantomScene {
    pub fn num_classes(&self) -> u8 {
        self.num_tissue_classes + 1
    }

    /// Class id of the high-impedance tissue that casts acoustic shadows.
    pub fn shadow_class(&self) -> u8 {
        self.num_tissue_classes
    }

    pub fn fan_contains(&self, x: f64, y: f64) -> bool {
        Fan::new(&self.fan, self.height, self.width).contains(x, y)
    }

    /// Pixel-center fan mask, row-major.
    pub fn fan_mask(&self) -> Vec<bool> {
        let fan = Fan::new(&self.fan, self.height, self.width);
        (0..self.height * self.width)
            .map(|i| fan.contains((i % self.width) as f64 + 0.5, (i / self.width) as f64 + 0.5))
            .collect()
    }
}

/// Scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub fan: FanGeometry,
    pub num_tissue_classes: u8,
    pub min_extra_ellipses: usize,
    pub max_extra_ellipses: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            fan: FanGeometry::sim_default(),
            num_tissue_classes: DEFAULT_TISSUE_CLASSES,
            min_extra_ellipses: 3,
            max_extra_ellipses: 6,
        }
    }
}

pub fn generate_scene(seed: u64, size: (usize, usize)) -> Result<PhantomScene> {
    generate_scene_with(seed, size, &SceneParams::default())
}

pub fn generate_scene_with(seed: u64, (height, width): (usize, usize), params: &SceneParams) -> Result<PhantomScene> {
    if height < MIN_SCENE_SIDE || width < MIN_SCENE_SIDE {
        return Err(Error::TooSmall { height, width, min: MIN_SCENE_SIDE });
    }
    params.fan.validate()?;
    if params.num_tissue_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 tissue classes".into()));
    }
    let mut rng = seed::rng(seed, Stream::Phantom);
    let fan = Fan::new(&params.fan, height, width);
    let (h, w) = (height as f64, width as f64);
    let k = params.num_tissue_classes;

    let mut ellipses = Vec::new();
    // A large body region so most of the fan carries tissue content.
    ellipses.push(Ellipse {
        center: [w * rng.random_range(0.45..0.55), h * rng.random_range(0.5..0.6)],
        axes: [w * rng.random_range(0.42..0.55), h * rng.random_range(0.36..0.46)],
        angle: rng.random_range(-0.3..0.3),
        class_id: 2.min(k),
    });
    let extra = rng.random_range(params.min_extra_ellipses..=params.max_extra_ellipses.max(params.min_extra_ellipses));
    let span = fan.r_max.min(h - fan.ay) - fan.r_min;
    for _ in 0..extra {
        let a = rng.random_range(-0.75..0.75) * fan.half_angle;
        let r = fan.r_min + span * rng.random_range(0.15..0.85);
        let class_id = rng.random_range(1..=k);
        let mut axes = [h * rng.random_range(0.06..0.2), h * rng.random_range(0.04..0.14)];
        if class_id == k {
            axes[1] *= 0.4;
        }
        ellipses.push(Ellipse {
            center: [fan.ax + r * a.sin(), fan.ay + r * a.cos()],
            axes,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            class_id,
        });
    }
    Ok(PhantomScene { seed, height, width, num_tissue_classes: k, fan: params.fan.clone(), ellipses })
}

pub fn render_seg(scene: &PhantomScene) -> SemanticMap {
    let fan = Fan::new(&scene.fan, scene.height, scene.width);
    let mut labels = vec![0u8; scene.height * scene.width];
    for (i, l) in labels.iter_mut().enumerate() {
        let (x, y) = ((i % scene.width) as f64 + 0.5, (i / scene.width) as f64 + 0.5);
        if !fan.contains(x, y) {
            continue;
        }
        if let Some(e) = scene.ellipses.iter().rev().find(|e| e.contains(x, y)) {
            *l = e.class_id;
        }
    }
    SemanticMap::new(scene.height, scene.width, scene.num_classes(), labels).expect("labels within palette")
}

/// Mean echo intensity (in `[0, 1]`) per class; index 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub names: Vec<String>,
    pub echogenicity: Vec<f64>,
}

impl Palette {
    pub fn for_classes(num_tissue_classes: u8) -> Self {
        const NAMES: [&str; 6] = ["fluid", "soft_tissue", "muscle", "fat", "organ", "bone"];
        const LEVELS: [f64; 6] = [0.06, 0.38, 0.5, 0.62, 0.26, 0.9];
        let k = num_tissue_classes as usize;
        let mut names = vec!["background".to_string()];
        let mut echogenicity = vec![0.14];
        for i in 0..k {
            if k == NAMES.len() {
                names.push(NAMES[i].to_string());
                echogenicity.push(LEVELS[i]);
            } else if i + 1 == k {
                names.push("bone".to_string());
                echogenicity.push(0.9);
            } else {
                names.push(format!("tissue{}", i + 1));
                // Spread levels without ordering them by class id.
                echogenicity.push(0.06 + 0.62 * (((i * 5) % k.max(2)) as f64 / (k.max(2) - 1) as f64));
            }
        }
        Self { names, echogenicity }
    }
}

/// Appearance model applied on top of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    /// Point-spread standard deviation along depth (pixels).
    pub psf_sigma_axial: f64,
    /// Point-spread standard deviation across the beam (pixels).
    pub psf_sigma_lateral: f64,
    pub gamma: f64,
    /// Attenuation per image height of depth (exponential rate).
    pub attenuation: f64,
    pub reverb_amplitude: f64,
    /// Band period as a fraction of the image height.
    pub reverb_period: f64,
    /// Band decay length as a fraction of the image height.
    pub reverb_decay: f64,
    /// Intensity multiplier behind high-impedance tissue; 1 disables shadows.
    pub shadow_factor: f64,
}

impl RenderStyle {
    pub fn sim() -> Self {
        Self {
            psf_sigma_axial: 0.7,
            psf_sigma_lateral: 1.2,
            gamma: 1.0,
            attenuation: 0.0,
            reverb_amplitude: 0.0,
            reverb_period: 0.1,
            reverb_decay: 0.25,
            shadow_factor: 0.35,
        }
    }

    pub fn real() -> Self {
        Self {
            psf_sigma_axial: 1.1,
            psf_sigma_lateral: 2.4,
            gamma: 0.65,
            attenuation: 0.7,
            reverb_amplitude: 0.14,
            reverb_period: 0.07,
            reverb_decay: 0.22,
            shadow_factor: 0.3,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable blur with clamped borders; preserves the mean of a constant field.
fn blur(field: &[f64], height: usize, width: usize, sigma_y: f64, sigma_x: f64) -> Vec<f64> {
    let kx = gaussian_kernel(sigma_x);
    let ky = gaussian_kernel(sigma_y);
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kx
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let xx = (x as isize + i as isize - rx).clamp(0, width as isize - 1) as usize;
                    kv * field[y * width + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = ky
                .iter()
                .enumerate()
                .map(|(i, kv)| {
                    let yy = (y as isize + i as isize - ry).clamp(0, height as isize - 1) as usize;
                    kv * tmp[yy * width + x]
                })
                .sum();
        }
    }
    out
}

/// Unit-mean multiplicative speckle: exponential noise blurred by the point spread.
pub fn speckle_field(seed: u64, height: usize, width: usize, style: &RenderStyle) -> Vec<f64> {
    let mut rng = seed::rng(seed, Stream::Speckle);
    let raw: Vec<f64> = (0..height * width).map(|_| Exp1.sample(&mut rng)).collect();
    blur(&raw, height, width, style.psf_sigma_axial, style.psf_sigma_lateral)
}

pub fn render(scene: &PhantomScene, style: &RenderStyle, palette: &Palette) -> Image {
    let (h, w) = (scene.height, scene.width);
    let fan = Fan::new(&scene.fan, h, w);
    let seg = render_seg(scene);
    let speckle = speckle_field(scene.seed, h, w, style);
    let bone = scene.shadow_class();
    let shadowers: Vec<&Ellipse> = scene.ellipses.iter().filter(|e| e.class_id == bone).collect();
    let mut data = vec![-1.0f32; h * w];
    for (i, px) in data.iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        if !fan.contains(x, y) {
            continue;
        }
        let (r, _) = fan.polar(x, y);
        let depth = (r - fan.r_min) / h as f64;
        let mut amp = palette.echogenicity[seg.labels()[i] as usize];
        if style.shadow_factor < 1.0 && !shadowers.is_empty() {
            let dir = ((x - fan.ax) / r, (y - fan.ay) / r);
            let shadowed = shadowers
                .iter()
                .any(|e| !e.contains(x, y) && e.exit_distance((fan.ax, fan.ay), dir).is_some_and(|t| t < r));
            if shadowed {
                amp *= style.shadow_factor;
            }
        }
        amp *= speckle[i] * (-style.attenuation * depth).exp();
        if style.gamma != 1.0 {
            amp = amp.max(0.0).powf(style.gamma);
        }
        if style.reverb_amplitude > 0.0 {
            let phase = 2.0 * std::f64::consts::PI * depth / style.reverb_period;
            amp += style.reverb_amplitude * 0.5 * (1.0 + phase.cos()) * (-depth / style.reverb_decay).exp();
        }
        *px = (2.0 * amp.clamp(0.0, 1.0) - 1.0) as f32;
    }
    Image::new(h, w, data).expect("rendered values are clamped to [-1, 1]")
}

pub fn render_sim(scene: &PhantomScene) -> Image {
    render(scene, &RenderStyle::sim(), &Palette::for_classes(scene.num_tissue_classes))
}

pub fn render_real(scene: &PhantomScene) -> Image {
    render(scene, &RenderStyle::real(), &Palette::for_classes(scene.num_tissue_classes))
}
