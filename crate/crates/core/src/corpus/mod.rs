//! Deterministic synthetic corpus: desk-scale "endoscopy-like" scenes.
//!
//! Normal frames are a pure function of ([`SceneSpec`], frame index): a warm
//! low-frequency background, a few slowly moving capsule-shaped instruments,
//! a drifting illumination gradient, and fine per-pixel film grain. The grain
//! matters: a reconstruction model trained on these frames learns to denoise,
//! so every normal frame carries a stable error floor. Anomalies then separate
//! in both directions — events that inject foreign structure (bleeding,
//! occlusion, camera withdrawal) push the error above the floor, while events
//! that veil texture (smoke haze, defocus blur) reconstruct unusually well
//! and fall below it.
//!
//! Everything here is bit-reproducible: scene constants derive from the seed,
//! per-frame decisions derive from seed + frame index, and grain is a stateless
//! position hash, so frames can be rendered in any order or in parallel.

pub mod ppm;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;

/// Stream id for scene-constant draws (palette, waves, instrument tracks).
const SCENE_STREAM: u64 = 1;
/// Base stream id for per-test-frame anomaly injection draws.
const INJECT_STREAM: u64 = 1 << 32;
/// Salt for the stateless film-grain hash.
const GRAIN_TAG: u64 = 0x6772_6169_6e00_0000;

/// Parameters of the synthetic scene. Identical specs render bit-identical
/// frame sequences on every platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Master seed for scene constants, grain, and anomaly draws.
    pub seed: u64,
    /// Square frame edge in pixels.
    pub size: usize,
    /// Number of moving capsule instruments.
    pub tool_count: usize,
    /// Scales every per-frame motion rate (poses, illumination drift).
    pub drift: f64,
    /// Strength of the corner-to-corner illumination falloff, in [0, 1).
    pub illumination: f64,
    /// Film grain amplitude (uniform per-pixel noise in ±grain).
    pub grain: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            size: 128,
            tool_count: 3,
            drift: 1.0,
            illumination: 0.35,
            grain: 0.015,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidConfig(format!("scene size {} is below the minimum of 8", self.size)));
        }
        if !(self.drift.is_finite() && self.drift > 0.0 && self.drift <= 16.0) {
            return Err(Error::InvalidConfig(format!("drift {} must be in (0, 16]", self.drift)));
        }
        if !(self.illumination.is_finite() && (0.0..1.0).contains(&self.illumination)) {
            return Err(Error::InvalidConfig(format!("illumination {} must be in [0, 1)", self.illumination)));
        }
        if !(self.grain.is_finite() && (0.0..=0.25).contains(&self.grain)) {
            return Err(Error::InvalidConfig(format!("grain {} must be in [0, 0.25]", self.grain)));
        }
        Ok(())
    }

    /// Upper bound on the mean absolute pixel change between consecutive
    /// frames. Grain redraws dominate (independent uniform ±g differs by
    /// 2g/3 on average); motion, illumination drift, and brightness wobble
    /// contribute the rest.
    pub fn smoothness_cap(&self) -> f64 {
        2.0 * self.grain + 0.012 * self.drift + 0.006
    }
}

/// The anomaly taxonomy the detector is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Growing saturated dark-red blob with wet specular noise.
    Bleed,
    /// Alpha-blended white haze; raises global brightness, flattens texture.
    Smoke,
    /// Large dark textured patch covering a big share of the frame.
    Occlusion,
    /// Gaussian defocus; preserves the mean, destroys fine detail.
    Blur,
    /// Scene replaced by a bright low-texture drape field.
    OutOfView,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Bleed,
        AnomalyKind::Smoke,
        AnomalyKind::Occlusion,
        AnomalyKind::Blur,
        AnomalyKind::OutOfView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Bleed => "bleed",
            AnomalyKind::Smoke => "smoke",
            AnomalyKind::Occlusion => "occlusion",
            AnomalyKind::Blur => "blur",
            AnomalyKind::OutOfView => "out_of_view",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bleed" => Ok(AnomalyKind::Bleed),
            "smoke" => Ok(AnomalyKind::Smoke),
            "occlusion" => Ok(AnomalyKind::Occlusion),
            "blur" => Ok(AnomalyKind::Blur),
            "out_of_view" => Ok(AnomalyKind::OutOfView),
            other => Err(Error::parse("anomaly kind", format!("unknown kind {other:?}"))),
        }
    }
}

/// Ground-truth label carried by every generated frame and manifest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameLabel {
    Normal,
    Anomalous(AnomalyKind),
}

impl FrameLabel {
    pub fn is_anomalous(self) -> bool {
        matches!(self, FrameLabel::Anomalous(_))
    }
}

impl fmt::Display for FrameLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameLabel::Normal => f.write_str("normal"),
            FrameLabel::Anomalous(kind) => kind.fmt(f),
        }
    }
}

impl FromStr for FrameLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("normal") {
            Ok(FrameLabel::Normal)
        } else {
            Ok(FrameLabel::Anomalous(s.parse()?))
        }
    }
}

/// A rendered frame with its ground-truth label.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub frame_index: usize,
    /// `3 x size x size`, values in [0, 1].
    pub image: Tensor<f32>,
    pub label: FrameLabel,
}

// ---------------------------------------------------------------------------
// Normal scene rendering
// ---------------------------------------------------------------------------

/// One sinusoidal background plate component.
struct Wave {
    channel: usize,
    amp: f32,
    kx: f32,
    ky: f32,
    phase: f32,
    /// Phase velocity in radians per frame.
    rate: f32,
}

/// Closed-form pose track of one capsule instrument. The pose at frame `t`
/// is computed directly from `t`, so frames can be rendered independently.
struct ToolTrack {
    anchor: (f32, f32),
    amp: (f32, f32),
    freq: (f32, f32),
    phase: (f32, f32),
    half_len: f32,
    radius: f32,
    theta0: f32,
    spin: f32,
    color: [f32; 3],
}

/// Scene constants drawn once from the spec seed.
struct SceneModel {
    spec: SceneSpec,
    palette: [f32; 3],
    waves: Vec<Wave>,
    illum_theta0: f32,
    illum_spin: f32,
    wobble_freq: f32,
    wobble_phase: f32,
    tools: Vec<ToolTrack>,
}

/// Linear-ramp edge coverage of a capsule at distance `d` from its axis.
fn coverage(d: f32, radius: f32) -> f32 {
    ((radius + 0.75 - d) / 1.5).clamp(0.0, 1.0)
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 { ((px * dx + py * dy) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Stateless film-grain hash in [0, 1): a pure function of position, so the
/// render order (or thread schedule) cannot change a single pixel.
fn grain_unit(seed: u64, frame: usize, channel: usize, y: usize, x: usize) -> f32 {
    let key = ((frame as u64) << 34) ^ ((channel as u64) << 32) ^ ((y as u64) << 16) ^ (x as u64);
    (rng::mix(seed ^ GRAIN_TAG, key) >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
}

impl SceneModel {
    fn new(spec: &SceneSpec) -> Self {
        let mut r = RngState::new(spec.seed).derive(SCENE_STREAM);
        let size = spec.size as f32;
        let drift = spec.drift as f32;
        let tau = std::f32::consts::TAU;

        let palette = [
            0.55 + 0.15 * r.unit_f32(),
            0.30 + 0.10 * r.unit_f32(),
            0.32 + 0.10 * r.unit_f32(),
        ];
        let mut waves = Vec::new();
        for channel in 0..3 {
            for _ in 0..2 {
                let cycles = r.uniform_f32(0.6, 2.2);
                let dir = r.uniform_f32(0.0, tau);
                let k = tau * cycles / size;
                waves.push(Wave {
                    channel,
                    amp: r.uniform_f32(0.04, 0.09),
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    phase: r.uniform_f32(0.0, tau),
                    rate: drift * r.uniform_f32(0.004, 0.012),
                });
            }
        }
        let illum_theta0 = r.uniform_f32(0.0, tau);
        let illum_spin = drift * 0.003;
        let wobble_freq = drift * tau / 240.0;
        let wobble_phase = r.uniform_f32(0.0, tau);
        let tools = (0..spec.tool_count)
            .map(|_| ToolTrack {
                anchor: (size * r.uniform_f32(0.18, 0.82), size * r.uniform_f32(0.18, 0.82)),
                amp: (size * r.uniform_f32(0.04, 0.16), size * r.uniform_f32(0.04, 0.16)),
                freq: (drift * r.uniform_f32(0.010, 0.040), drift * r.uniform_f32(0.010, 0.040)),
                phase: (r.uniform_f32(0.0, tau), r.uniform_f32(0.0, tau)),
                half_len: size * r.uniform_f32(0.16, 0.26),
                radius: size * r.uniform_f32(0.025, 0.045),
                theta0: r.uniform_f32(0.0, tau),
                spin: drift * r.uniform_f32(-0.014, 0.014),
                color: [
                    0.50 + 0.10 * r.unit_f32(),
                    0.52 + 0.08 * r.unit_f32(),
                    0.56 + 0.10 * r.unit_f32(),
                ],
            })
            .collect();

        SceneModel {
            spec: spec.clone(),
            palette,
            waves,
            illum_theta0,
            illum_spin,
            wobble_freq,
            wobble_phase,
            tools,
        }
    }

    fn render(&self, frame: usize) -> Tensor<f32> {
        let size = self.spec.size;
        let sizef = size as f32;
        let t = frame as f32;
        let grain = self.spec.grain as f32;
        let seed = self.spec.seed;

        // Per-frame state of every closed-form track.
        let wave_phase: Vec<f32> = self.waves.iter().map(|w| w.phase + w.rate * t).collect();
        let illum_theta = self.illum_theta0 + self.illum_spin * t;
        let (ill_cos, ill_sin) = (illum_theta.cos(), illum_theta.sin());
        let illum = self.spec.illumination as f32;
        let wobble = 1.0 + 0.04 * (self.wobble_freq * t + self.wobble_phase).sin();
        let poses: Vec<((f32, f32), (f32, f32), f32)> = self
            .tools
            .iter()
            .map(|tool| {
                let cx = tool.anchor.0 + tool.amp.0 * (tool.freq.0 * t + tool.phase.0).sin();
                let cy = tool.anchor.1 + tool.amp.1 * (tool.freq.1 * t + tool.phase.1).sin();
                let theta = tool.theta0 + tool.spin * t;
                let (dx, dy) = (theta.cos() * tool.half_len, theta.sin() * tool.half_len);
                ((cx - dx, cy - dy), (cx + dx, cy + dy), 0.0)
            })
            .collect();

        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f32, y as f32);
                let mut px = self.palette;
                for (w, ph) in self.waves.iter().zip(&wave_phase) {
                    px[w.channel] += w.amp * (w.kx * xf + w.ky * yf + ph).sin();
                }
                for (tool, pose) in self.tools.iter().zip(&poses) {
                    let d = segment_distance((xf, yf), pose.0, pose.1);
                    let a = coverage(d, tool.radius);
                    if a > 0.0 {
                        let mut col = tool.color;
                        // specular ridge along the instrument axis
                        let ridge = 0.35 * tool.radius;
                        if d < ridge {
                            let glint = 0.18 * (1.0 - d / ridge);
                            for c in &mut col {
                                *c += glint;
                            }
                        }
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - a) + col[c] * a;
                        }
                    }
                }
                let u = (xf + 0.5) / sizef - 0.5;
                let v = (yf + 0.5) / sizef - 0.5;
                let g = ill_cos * u + ill_sin * v; // in ±0.7071
                let shade = (1.0 - illum * 0.5 * (g / 0.7071 + 1.0) * 0.5) * wobble;
                for c in 0..3 {
                    // headroom below 1.0 keeps haze blending strictly brightening
                    let base = (px[c] * shade).clamp(0.0, 0.96);
                    let noise = grain * (2.0 * grain_unit(seed, frame, c, y, x) - 1.0);
                    data[c * plane + y * size + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(vec![3, size, size], data).expect("render buffer matches shape")
    }
}

/// Renders `count` consecutive normal frames starting at index 0.
pub fn generate_normal(spec: &SceneSpec, count: usize) -> Result<Vec<LabeledFrame>> {
    spec.validate()?;
    let model = SceneModel::new(spec);
    Ok((0..count)
        .map(|i| LabeledFrame { frame_index: i, image: model.render(i), label: FrameLabel::Normal })
        .collect())
}

// ---------------------------------------------------------------------------
// Anomaly injection
// ---------------------------------------------------------------------------

/// Applies `kind` to a normal frame at the given strength.
///
/// `intensity` in (0, 1] scales the effect (blob radius, haze opacity, patch
/// area, defocus radius). All stochastic choices come from `rng`, so equal rng
/// states reproduce the exact output. Re-injecting into an already anomalous
/// frame is rejected.
pub fn inject_anomaly(
    frame: &LabeledFrame,
    kind: AnomalyKind,
    intensity: f64,
    rng: &mut RngState,
) -> Result<LabeledFrame> {
    if frame.label != FrameLabel::Normal {
        return Err(Error::arg(
            "inject_anomaly",
            format!("frame {} is already labeled {}", frame.frame_index, frame.label),
        ));
    }
    if !(intensity.is_finite() && intensity > 0.0 && intensity <= 1.0) {
        return Err(Error::arg("inject_anomaly", format!("intensity {intensity} must be in (0, 1]")));
    }
    let shape = frame.image.shape();
    let [c, h, w] = shape else {
        return Err(Error::shape("inject_anomaly", format!("expected 3xHxW, got {shape:?}")));
    };
    if *c != 3 {
        return Err(Error::shape("inject_anomaly", format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let mut image = frame.image.clone();
    let i = intensity as f32;
    match kind {
        AnomalyKind::Bleed => inject_bleed(&mut image, h, w, i, rng),
        AnomalyKind::Smoke => inject_smoke(&mut image, h, w, i, rng),
        AnomalyKind::Occlusion => inject_occlusion(&mut image, h, w, i, rng),
        AnomalyKind::Blur => inject_blur(&mut image, h, w, i),
        AnomalyKind::OutOfView => inject_out_of_view(&mut image, h, w, i, rng),
    }
    Ok(LabeledFrame { frame_index: frame.frame_index, image, label: FrameLabel::Anomalous(kind) })
}

/// Hash noise in ±amp used inside injected regions.
fn salted_noise(salt: u64, channel: usize, y: usize, x: usize, amp: f32) -> f32 {
    let key = ((channel as u64) << 32) ^ ((y as u64) << 16) ^ (x as u64);
    let unit = (rng::mix(salt, key) >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
    amp * (2.0 * unit - 1.0)
}

/// Dark saturated red blob with wet specular noise. The high-frequency
/// texture is unpredictable from the scene, so reconstruction error rises.
fn inject_bleed(image: &mut Tensor<f32>, h: usize, w: usize, intensity: f32, rng: &mut RngState) {
    let cx = w as f32 * rng.uniform_f32(0.30, 0.70);
    let cy = h as f32 * rng.uniform_f32(0.30, 0.70);
    let salt = rng.next_u64();
    let radius = w.min(h) as f32 * (0.16 + 0.22 * intensity);
    let base = [0.40f32, 0.03, 0.05];
    let plane = h * w;
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            if d >= radius {
                continue;
            }
            // soften the rim over the outer 12% of the radius
            let rim = ((radius - d) / (0.12 * radius)).clamp(0.0, 1.0);
            let alpha = 0.9 * rim;
            for c in 0..3 {
                let wet = base[c] + salted_noise(salt, c, y, x, 0.12);
                let p = &mut data[c * plane + y * w + x];
                *p = (*p * (1.0 - alpha) + wet.clamp(0.0, 1.0) * alpha).clamp(0.0, 1.0);
            }
        }
    }
}

/// Billowing cautery haze: veils fine detail by blending toward a smoothed
/// copy of the frame, with a mild brightness lift on top. Mean brightness
/// still rises monotonically with intensity, but the dominant effect is the
/// loss of high-frequency texture — hazed frames are *smoother* than any
/// normal frame, so a reconstruction model tracking the scene's coarse
/// structure reproduces them unusually well and their error falls.
fn inject_smoke(image: &mut Tensor<f32>, h: usize, w: usize, intensity: f32, rng: &mut RngState) {
    let tau = std::f32::consts::TAU;
    let px = rng.uniform_f32(0.0, tau);
    let py = rng.uniform_f32(0.0, tau);
    let fx = rng.uniform_f32(0.6, 1.3) * tau / w as f32;
    let fy = rng.uniform_f32(0.6, 1.3) * tau / h as f32;
    let opacity = 0.72 + 0.28 * intensity;
    let lift = 0.03 + 0.04 * intensity;
    let sigma = w.min(h) as f32 * (0.035 + 0.035 * intensity);

    let mut smooth = image.data().to_vec();
    gaussian_smooth(&mut smooth, h, w, sigma);

    let plane = h * w;
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let billow = 0.85 + 0.15 * (fx * x as f32 + px).sin() * (fy * y as f32 + py).sin();
            let alpha = (opacity * billow).clamp(0.0, 1.0);
            for c in 0..3 {
                let idx = c * plane + y * w + x;
                let p = &mut data[idx];
                let veiled = *p + alpha * (smooth[idx] - *p);
                *p = (veiled + alpha * lift * (1.0 - veiled)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Dark textured patch whose area fraction is `0.25 + 0.35 * intensity`, so
/// full intensity covers at least 40% of the frame.
fn inject_occlusion(image: &mut Tensor<f32>, h: usize, w: usize, intensity: f32, rng: &mut RngState) {
    let frac = 0.25 + 0.35 * intensity;
    let aspect = rng.uniform_f32(0.7, 1.4);
    let ux = rng.unit_f32();
    let uy = rng.unit_f32();
    let salt = rng.next_u64();

    let area = frac * (w as f32) * (h as f32);
    let mut pw = (area * aspect).sqrt();
    let mut ph = area / pw;
    if pw > w as f32 {
        pw = w as f32;
        ph = area / pw;
    }
    if ph > h as f32 {
        ph = h as f32;
        pw = (area / ph).min(w as f32);
    }
    let x0 = (ux * (w as f32 - pw)).round() as usize;
    let y0 = (uy * (h as f32 - ph)).round() as usize;
    let x1 = (x0 + pw.round() as usize).min(w);
    let y1 = (y0 + ph.round() as usize).min(h);

    let stripe_phase = rng.uniform_f32(0.0, std::f32::consts::TAU);
    let base = [0.08f32, 0.07, 0.08];
    let plane = h * w;
    let data = image.data_mut();
    for y in y0..y1 {
        for x in x0..x1 {
            let weave = 0.02 * ((x + y) as f32 / (0.04 * w as f32) + stripe_phase).sin();
            for c in 0..3 {
                let v = base[c] + weave + salted_noise(salt, c, y, x, 0.035);
                data[c * plane + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// In-place separable Gaussian over three `H x W` planes with
/// edge-renormalized taps, preserving the image mean while strictly
/// shrinking variance.
fn gaussian_smooth(data: &mut [f32], h: usize, w: usize, sigma: f32) {
    let half = (3.0 * sigma).ceil() as isize;
    let half = half.max(1);
    let weights: Vec<f32> =
        (-half..=half).map(|j| (-(j * j) as f32 / (2.0 * sigma * sigma)).exp()).collect();

    let plane = h * w;
    let mut tmp = vec![0.0f32; plane];
    for c in 0..3 {
        let ch = &mut data[c * plane..(c + 1) * plane];
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (wi, j) in weights.iter().zip(-half..=half) {
                    let xx = x as isize + j;
                    if (0..w as isize).contains(&xx) {
                        acc += wi * ch[y * w + xx as usize];
                        norm += wi;
                    }
                }
                tmp[y * w + x] = acc / norm;
            }
        }
        // vertical pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (wi, j) in weights.iter().zip(-half..=half) {
                    let yy = y as isize + j;
                    if (0..h as isize).contains(&yy) {
                        acc += wi * tmp[yy as usize * w + x];
                        norm += wi;
                    }
                }
                ch[y * w + x] = acc / norm;
            }
        }
    }
}

/// Whole-frame defocus via [`gaussian_smooth`].
fn inject_blur(image: &mut Tensor<f32>, h: usize, w: usize, intensity: f32) {
    let sigma = w.min(h) as f32 * (0.008 + 0.045 * intensity);
    gaussian_smooth(image.data_mut(), h, w, sigma);
}

/// Blend toward a bright, nearly featureless drape field.
fn inject_out_of_view(image: &mut Tensor<f32>, h: usize, w: usize, intensity: f32, rng: &mut RngState) {
    let tau = std::f32::consts::TAU;
    let p1 = rng.uniform_f32(0.0, tau);
    let p2 = rng.uniform_f32(0.0, tau);
    let alpha = 0.55 + 0.45 * intensity;
    let base = [0.84f32, 0.82, 0.79];
    let plane = h * w;
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            // soft fabric folds: one low-frequency modulated wave
            let fold = 0.035
                * ((x as f32 / w as f32) * 1.3 * tau + p1
                    + 0.8 * ((y as f32 / h as f32) * 0.9 * tau + p2).sin())
                .sin();
            for c in 0..3 {
                let drape = (base[c] + fold).clamp(0.0, 1.0);
                let p = &mut data[c * plane + y * w + x];
                *p = *p * (1.0 - alpha) + drape * alpha;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Anomaly plans and corpus building
// ---------------------------------------------------------------------------

/// One contiguous run of anomalous frames in the test partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySegment {
    pub kind: AnomalyKind,
    /// First affected test-frame index (0-based within the test partition).
    pub start: usize,
    /// Number of consecutive affected frames.
    pub len: usize,
    pub intensity: f64,
}

impl AnomalySegment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Parses a plan of the form `kind:start:len:intensity,...`, e.g.
/// `bleed:40:25:0.8,smoke:90:30:1.0`. An empty string is an empty plan.
pub fn parse_plan(text: &str) -> Result<Vec<AnomalySegment>> {
    let mut plan = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                "anomaly plan",
                format!("segment {part:?} must be kind:start:len:intensity"),
            ));
        }
        let kind: AnomalyKind = fields[0].parse()?;
        let start: usize = fields[1]
            .trim()
            .parse()
            .map_err(|e| Error::parse("anomaly plan", format!("bad start in {part:?}: {e}")))?;
        let len: usize = fields[2]
            .trim()
            .parse()
            .map_err(|e| Error::parse("anomaly plan", format!("bad length in {part:?}: {e}")))?;
        let intensity: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|e| Error::parse("anomaly plan", format!("bad intensity in {part:?}: {e}")))?;
        plan.push(AnomalySegment { kind, start, len, intensity });
    }
    Ok(plan)
}

/// Rejects zero-length, out-of-range, overlapping, or bad-intensity segments.
pub fn validate_plan(plan: &[AnomalySegment], test_count: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(plan.len());
    for seg in plan {
        if seg.len == 0 {
            return Err(Error::arg("anomaly plan", format!("segment at {} has zero length", seg.start)));
        }
        if !(seg.intensity.is_finite() && seg.intensity > 0.0 && seg.intensity <= 1.0) {
            return Err(Error::arg(
                "anomaly plan",
                format!("segment at {} has intensity {} outside (0, 1]", seg.start, seg.intensity),
            ));
        }
        if seg.end() > test_count {
            return Err(Error::arg(
                "anomaly plan",
                format!("segment [{}, {}) exceeds the test partition of {test_count} frames", seg.start, seg.end()),
            ));
        }
        spans.push((seg.start, seg.end()));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::arg(
                "anomaly plan",
                format!(
                    "segments [{}, {}) and [{}, {}) overlap",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                ),
            ));
        }
    }
    Ok(())
}

/// One line of the labels manifest: a test-partition frame and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// 0-based index within the test partition (stream order).
    pub frame_index: usize,
    /// Path relative to the corpus root, e.g. `test/frame_00012.ppm`.
    pub filename: String,
    pub label: FrameLabel,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("manifest", e))?;
    w.write_record(["frame_index", "filename", "label"])
        .and_then(|_| {
            for row in rows {
                w.write_record([
                    row.frame_index.to_string(),
                    row.filename.clone(),
                    row.label.to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::parse("manifest", e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse("manifest", e))?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::parse("manifest", e))?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| {
                Error::parse("manifest", format!("row has {} fields, need 3", record.len()))
            })
        };
        let frame_index = field(0)?
            .parse::<usize>()
            .map_err(|e| Error::parse("manifest", format!("frame_index: {e}")))?;
        rows.push(ManifestRow {
            frame_index,
            filename: field(1)?.to_string(),
            label: field(2)?.parse()?,
        });
    }
    Ok(rows)
}

fn frame_filename(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

/// Renders and writes a complete corpus:
///
/// ```text
/// out_dir/
///   train/frame_00000.ppm ...   all-normal training frames
///   test/frame_00000.ppm ...    evaluation stream, anomalies per plan
///   manifest.csv                labels for the test partition
/// ```
///
/// The train partition holds scene frames `0 .. train_count`; the test
/// partition continues at `train_count`, so the two never share a frame.
/// Plan indices address the test partition. Per-frame injection draws derive
/// from seed + frame index, making corpus bytes a pure function of the inputs.
pub fn build_corpus(
    spec: &SceneSpec,
    train_count: usize,
    test_count: usize,
    plan: &[AnomalySegment],
    out_dir: &Path,
) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    validate_plan(plan, test_count)?;

    let train_dir = out_dir.join("train");
    let test_dir = out_dir.join("test");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;
    fs::create_dir_all(&test_dir).map_err(|e| Error::io(&test_dir, e))?;

    let model = SceneModel::new(spec);
    let root_rng = RngState::new(spec.seed);

    for t in 0..train_count {
        let image = model.render(t);
        ppm::write_ppm(&train_dir.join(frame_filename(t)), &image)?;
    }

    let mut rows = Vec::with_capacity(test_count);
    for j in 0..test_count {
        let scene_frame = train_count + j;
        let normal = LabeledFrame {
            frame_index: j,
            image: model.render(scene_frame),
            label: FrameLabel::Normal,
        };
        let segment = plan.iter().find(|seg| seg.start <= j && j < seg.end());
        let frame = match segment {
            Some(seg) => {
                let mut frame_rng = root_rng.derive(INJECT_STREAM + j as u64);
                inject_anomaly(&normal, seg.kind, seg.intensity, &mut frame_rng)?
            }
            None => normal,
        };
        let filename = frame_filename(j);
        ppm::write_ppm(&test_dir.join(&filename), &frame.image)?;
        rows.push(ManifestRow { frame_index: j, filename: format!("test/{filename}"), label: frame.label });
    }

    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// A file that could not be decoded during ingestion, with the reason.
#[derive(Debug, Clone)]
pub struct SkipRecord {
    pub filename: String,
    pub detail: String,
}

/// Frames loaded from a directory plus any skipped files.
#[derive(Debug)]
pub struct IngestResult {
    /// Decoded frames in lexicographic filename order, resized to
    /// `3 x target x target`, values in [0, 1].
    pub frames: Vec<Tensor<f32>>,
    /// Source file names aligned with `frames`.
    pub sources: Vec<String>,
    pub skipped: Vec<SkipRecord>,
}

/// Loads every decodable pixmap under `dir` (non-recursive), in lexicographic
/// filename order, bilinearly resized to `target_size`. Files that fail to
/// decode are skipped with a warning record. A directory with no loadable
/// frames is an error.
pub fn ingest_directory(dir: &Path, target_size: usize) -> Result<IngestResult> {
    if target_size == 0 {
        return Err(Error::arg("ingest_directory", "target size must be positive"));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: BTreeSet<PathBuf> = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            files.insert(entry.path());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyInput { op: "ingest_directory" });
    }

    let mut frames = Vec::new();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let decoded = fs::read(&path)
            .map_err(|e| Error::io(&path, e))
            .and_then(|bytes| ppm::decode_ppm(&bytes));
        match decoded {
            Ok(image) => {
                let resized = if image.shape()[1] == target_size && image.shape()[2] == target_size {
                    image
                } else {
                    ppm::resize_bilinear(&image, target_size, target_size)?
                };
                frames.push(resized);
                sources.push(name);
            }
            Err(err) => skipped.push(SkipRecord { filename: name, detail: err.to_string() }),
        }
    }
    if frames.is_empty() {
        return Err(Error::parse(
            dir.display().to_string(),
            format!("none of {} file(s) decoded as P6 pixmaps", skipped.len()),
        ));
    }
    Ok(IngestResult { frames, sources, skipped })
}
