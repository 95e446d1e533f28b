//! Synthetic two-domain lane scenes and their on-disk format.
//!
//! Lanes are quadratic curves rasterized into a class mask. Each lane class
//! has its own paint colour so a lane's identity is visible locally. The
//! domain style only changes the photometry (plus an optional horizontal
//! shift), so the same geometry stream yields the same mask in both domains.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Domain, Error, Result};
use crate::labels::{ClassMap, UNLABELED};
use crate::tensor::Tensor;

/// `(x, y)` pixel coordinates, ordered bottom to top.
pub type LanePoints = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct LaneScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: ClassMap,
    /// Ground-truth points, `lanes[c - 1]` for class `c`.
    pub lanes: Vec<LanePoints>,
}

impl LaneScene {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    /// Mirror image, mask and points along the vertical axis.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let src = self.image.values();
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let (row, col) = (i / w, i % w);
            src[row * w + (w - 1 - col)]
        });
        let lanes = self
            .lanes
            .iter()
            .map(|l| l.iter().map(|&(x, y)| ((w - 1) as f64 - x, y)).collect())
            .collect();
        Self {
            image,
            label: self.label.flipped(),
            lanes,
        }
    }

    /// Same image with every label pixel [`UNLABELED`] and no lane points.
    pub fn hide_labels(&self) -> Self {
        let lanes = self.label.num_lanes();
        Self {
            image: self.image.clone(),
            label: ClassMap::filled(self.height(), self.width(), lanes, UNLABELED),
            lanes: vec![Vec::new(); self.lanes.len()],
        }
    }

    pub fn labels_hidden(&self) -> bool {
        self.label.classes().iter().all(|&c| c == UNLABELED) && self.lanes.iter().all(|l| l.is_empty())
    }
}

/// Photometric appearance of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Mean road grey, in `[0, 1]`.
    pub background: f64,
    /// Amplitude of the smooth road texture, in `[0, 0.5]`.
    pub texture: f64,
    /// Multiplier on the lane paint colour, in `[0, 1]`.
    pub lane_brightness: f64,
    /// Per-channel multiplier applied to the whole image.
    pub color_cast: [f64; 3],
    /// Additive Gaussian noise, in `[0, 0.5]`.
    pub noise_sigma: f64,
    /// Added to every pixel, in `[-0.5, 0.5]`.
    pub brightness_shift: f64,
    /// Maximum horizontal shift of the whole lane set in pixels.
    pub jitter: f64,
    /// 3x3 box blur before noise.
    pub blur: bool,
}

impl DomainStyle {
    /// Clean simulator look.
    pub fn source() -> Self {
        Self {
            background: 0.25,
            texture: 0.02,
            lane_brightness: 1.0,
            color_cast: [1.0, 1.0, 1.0],
            noise_sigma: 0.0,
            brightness_shift: 0.0,
            jitter: 0.0,
            blur: false,
        }
    }

    /// Brighter, textured, colour-cast, noisy and blurred.
    pub fn target() -> Self {
        Self {
            background: 0.35,
            texture: 0.1,
            lane_brightness: 0.7,
            color_cast: [1.0, 1.0, 1.0],
            noise_sigma: 0.12,
            brightness_shift: 0.0,
            jitter: 2.0,
            blur: true,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64| v.is_finite() && (lo..=hi).contains(&v);
        let ok = in_range(self.background, 0.0, 1.0)
            && in_range(self.texture, 0.0, 0.5)
            && in_range(self.lane_brightness, 0.0, 1.0)
            && self.color_cast.iter().all(|&c| in_range(c, 0.0, 2.0))
            && in_range(self.noise_sigma, 0.0, 0.5)
            && in_range(self.brightness_shift, -0.5, 0.5)
            && in_range(self.jitter, 0.0, 64.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("domain style out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub num_lanes: usize,
    pub height: usize,
    pub width: usize,
    /// Stroke width in image pixels (twice the feature-resolution width).
    pub stroke_width: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_lanes: 2,
            height: 64,
            width: 64,
            stroke_width: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_lanes == 0 || self.num_lanes > 8 {
            return Err(Error::Config(format!("num_lanes {} outside 1..=8", self.num_lanes)));
        }
        if self.stroke_width == 0 {
            return Err(Error::Config("stroke_width must be positive".into()));
        }
        if self.height < 8 || self.width < self.num_lanes * 8 {
            return Err(Error::Config(format!(
                "{}x{} image cannot hold {} lanes",
                self.height, self.width, self.num_lanes
            )));
        }
        Ok(())
    }
}

/// Paint colour of lane class `c`.
pub fn lane_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [
        [0.95, 0.8, 0.15],
        [0.95, 0.95, 0.95],
        [0.2, 0.8, 0.95],
        [0.95, 0.45, 0.15],
    ];
    let base = PALETTE[(class - 1) % PALETTE.len()];
    // later cycles get darker
    let dim = 1.0 - 0.25 * ((class - 1) / PALETTE.len()) as f64;
    base.map(|v| v * dim)
}

/// Lane `x = a + b*s + c*s^2` with `s = (H - 1) - y`, the row distance from
/// the bottom edge, drawn on rows `top..H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub top: usize,
}

impl LaneCurve {
    pub fn x_at(&self, y: f64, height: usize) -> f64 {
        let s = (height - 1) as f64 - y;
        self.a + self.b * s + self.c * s * s
    }
}

/// First column of the `w`-wide stroke centred on `x`. Pixel `j` has its
/// centre at `x = j`, so the stroke's mean column is within half a pixel of
/// `x` and every pixel centre is within `w / 2` of it.
pub fn stroke_start(x: f64, w: usize) -> i64 {
    (x - (w as f64 - 1.0) / 2.0).round() as i64
}

fn draw_curves(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<LaneCurve> {
    let (h, w, n) = (cfg.height as f64, cfg.width as f64, cfg.num_lanes);
    let spacing = w / n as f64;
    let min_gap = cfg.stroke_width as f64 + 2.0;
    for attempt in 0..32 {
        let top = (h * rng.random_range(0.1..0.3)).round() as usize;
        let straight = attempt == 31;
        let b = if straight { 0.0 } else { rng.random_range(-0.25..0.25) };
        let c = if straight { 0.0 } else { rng.random_range(-0.6..0.6) / h };
        let curves: Vec<LaneCurve> = (0..n)
            .map(|k| {
                let a = (k as f64 + 0.5) * spacing + rng.random_range(-0.1..0.1) * spacing;
                // mild convergence toward the image centre
                let pull = if straight { 0.0 } else { 0.6 * (w / 2.0 - a) / h };
                LaneCurve { a, b: b + pull, c, top }
            })
            .collect();
        let separated = (top..cfg.height).all(|y| {
            curves
                .windows(2)
                .all(|p| p[1].x_at(y as f64, cfg.height) - p[0].x_at(y as f64, cfg.height) >= min_gap)
        });
        if separated || straight {
            return curves;
        }
    }
    unreachable!("the last attempt always returns")
}

/// Rounds to a multiple of 1/1024 so mirroring (`W - 1 - x`) is exact.
fn snap(x: f64) -> f64 {
    (x * 1024.0).round() / 1024.0
}

fn rasterize(curves: &[LaneCurve], cfg: &SceneConfig) -> (ClassMap, Vec<LanePoints>) {
    let (h, w) = (cfg.height, cfg.width);
    let bg = cfg.num_lanes as u8 + 1;
    let mut label = ClassMap::filled(h, w, cfg.num_lanes, bg);
    let mut lanes = Vec::with_capacity(curves.len());
    for (k, curve) in curves.iter().enumerate() {
        let class = k as u8 + 1;
        let mut points = Vec::new();
        for y in (curve.top..h).rev() {
            let x = snap(curve.x_at(y as f64, h));
            if x < 0.0 || x > (w - 1) as f64 {
                continue;
            }
            points.push((x, y as f64));
            let start = stroke_start(x, cfg.stroke_width);
            for j in start..start + cfg.stroke_width as i64 {
                if (0..w as i64).contains(&j) {
                    label.set(y * w + j as usize, class);
                }
            }
        }
        lanes.push(points);
    }
    (label, lanes)
}

/// Smooth value noise in `[-1, 1]`, bilinearly interpolated from a coarse grid.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const GRID: usize = 6;
    let g: Vec<f64> = (0..(GRID + 1) * (GRID + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = i as f64 / h as f64 * GRID as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for j in 0..w {
            let fx = j as f64 / w as f64 * GRID as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |r: usize, c: usize| g[r * (GRID + 1) + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn box_blur(img: &mut [f64], h: usize, w: usize) {
    let src = img.to_vec();
    for ch in 0..3 {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (r, c) = (i as i64 + di, j as i64 + dj);
                        if (0..h as i64).contains(&r) && (0..w as i64).contains(&c) {
                            s += plane[r as usize * w + c as usize];
                            n += 1.0;
                        }
                    }
                }
                img[ch * h * w + i * w + j] = s / n;
            }
        }
    }
}

fn render(label: &ClassMap, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (label.height(), label.width());
    let hw = h * w;
    let texture = value_noise(rng, h, w);
    let mut img = vec![0.0; 3 * hw];
    for p in 0..hw {
        let row = p / w;
        // road gets slightly darker toward the horizon
        let shade = style.background * (0.85 + 0.15 * row as f64 / h as f64) + style.texture * texture[p];
        let color = match label.get(p) {
            c if label.is_lane(p) => lane_color(c as usize).map(|v| v * style.lane_brightness),
            _ => [shade; 3],
        };
        for ch in 0..3 {
            img[ch * hw + p] = color[ch];
        }
    }
    if style.blur {
        box_blur(&mut img, h, w);
    }
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    for ch in 0..3 {
        for v in &mut img[ch * hw..(ch + 1) * hw] {
            let n = if style.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (*v * style.color_cast[ch] + style.brightness_shift + n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], img).expect("3*H*W values")
}

/// One scene. Geometry and photometry use separate streams split off `rng`,
/// so two styles fed the same `rng` state draw the same lanes.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig, style: &DomainStyle) -> LaneScene {
    let mut geo = ChaCha8Rng::seed_from_u64(rng.random());
    let mut photo = ChaCha8Rng::seed_from_u64(rng.random());
    let mut curves = draw_curves(&mut geo, cfg);
    if style.jitter > 0.0 {
        let shift = photo.random_range(-style.jitter..=style.jitter);
        for c in &mut curves {
            c.a += shift;
        }
    }
    let (label, lanes) = rasterize(&curves, cfg);
    let image = render(&label, style, &mut photo);
    LaneScene { image, label, lanes }
}

/// `count` scenes; scene `i` uses stream `i` of `seed`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SceneConfig, style: &DomainStyle) -> Vec<LaneScene> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(&mut rng, cfg, style)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub num_lanes: usize,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub labels_hidden: bool,
    pub seed: u64,
    pub config_hash: String,
}

impl Manifest {
    pub fn render(&self) -> String {
        format!(
            "count={}\nnum_lanes={}\nheight={}\nwidth={}\ndomain={}\nlabels_hidden={}\nseed={}\nconfig_hash={}\n",
            self.count, self.num_lanes, self.height, self.width, self.domain, self.labels_hidden, self.seed, self.config_hash
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line {}: expected key=value", n + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("manifest is missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("manifest `{k}` is not an integer")))
        };
        Ok(Self {
            count: num("count")? as usize,
            num_lanes: num("num_lanes")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            domain: get("domain")?.parse().map_err(|e: Error| Error::Data(e.to_string()))?,
            labels_hidden: match get("labels_hidden")?.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::Data(format!("manifest labels_hidden `{other}`"))),
            },
            seed: num("seed")?,
            config_hash: get("config_hash")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<LaneScene>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank("encode_ppm", 3)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("{c} channels")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let v = image.values();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(v[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(label: &ClassMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", label.width(), label.height()).into_bytes();
    out.extend_from_slice(label.classes());
    out
}

/// Parses a binary Netpbm header and returns `(width, height, payload)`.
fn netpbm<'a>(bytes: &'a [u8], magic: &str, what: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{what}: truncated header")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::Data(format!("{what}: expected {magic}, found `{}`", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("{what}: bad header field `{s}`")))
    };
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(Error::Data(format!("{what}: maxval {max}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((w, h, &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, data) = netpbm(bytes, "P6", "ppm")?;
    if data.len() != 3 * w * h {
        return Err(Error::Data(format!("ppm: {} raster bytes for {w}x{h}", data.len())));
    }
    let hw = w * h;
    Tensor::new(vec![3, h, w], (0..3 * hw).map(|i| data[(i % hw) * 3 + i / hw] as f64 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8], num_lanes: usize) -> Result<ClassMap> {
    let (w, h, data) = netpbm(bytes, "P5", "pgm")?;
    if data.len() != w * h {
        return Err(Error::Data(format!("pgm: {} raster bytes for {w}x{h}", data.len())));
    }
    ClassMap::new(h, w, num_lanes, data.to_vec())
}

pub fn encode_lanes(lanes: &[LanePoints]) -> String {
    let mut out = String::new();
    for lane in lanes {
        let line: Vec<String> = lane.iter().map(|(x, y)| format!("{x} {y}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn decode_lanes(text: &str, num_lanes: usize) -> Result<Vec<LanePoints>> {
    let lanes: Vec<LanePoints> = text
        .lines()
        .map(|line| {
            let nums = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("lane file: bad number `{t}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if nums.len() % 2 == 1 {
                return Err(Error::Data("lane file: odd number of coordinates".into()));
            }
            Ok(nums.chunks(2).map(|p| (p[0], p[1])).collect())
        })
        .collect::<Result<_>>()?;
    if lanes.len() != num_lanes {
        return Err(Error::Data(format!("lane file has {} lanes, expected {num_lanes}", lanes.len())));
    }
    Ok(lanes)
}

fn scene_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes `images/`, `labels/`, `lanes/` and `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, manifest: &Manifest, scenes: &[LaneScene]) -> Result<()> {
    if manifest.count != scenes.len() {
        return Err(Error::Data(format!(
            "manifest says {} scenes, {} given",
            manifest.count,
            scenes.len()
        )));
    }
    for sub in ["images", "labels", "lanes"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_name(i);
        let hidden;
        let s = if manifest.labels_hidden {
            hidden = s.hide_labels();
            &hidden
        } else {
            s
        };
        fs::write(dir.join("images").join(format!("{name}.ppm")), encode_ppm(&s.image)?)?;
        fs::write(dir.join("labels").join(format!("{name}.pgm")), encode_pgm(&s.label))?;
        fs::write(dir.join("lanes").join(format!("{name}.txt")), encode_lanes(&s.lanes))?;
    }
    fs::write(dir.join("manifest.txt"), manifest.render())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Manifest::parse(&text)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let on_disk = match fs::read_dir(dir.join("images")) {
        Ok(entries) => entries.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "ppm")).count(),
        Err(_) if manifest.count == 0 => 0,
        Err(e) => return Err(Error::Data(format!("{}: {e}", dir.join("images").display()))),
    };
    if on_disk != manifest.count {
        return Err(Error::Data(format!(
            "manifest lists {} scenes but {on_disk} images exist",
            manifest.count
        )));
    }
    let read = |sub: &str, name: &str, ext: &str| {
        let p = dir.join(sub).join(format!("{name}.{ext}"));
        fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    };
    let mut scenes = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let name = scene_name(i);
        let image = decode_ppm(&read("images", &name, "ppm")?)?;
        let label = decode_pgm(&read("labels", &name, "pgm")?, manifest.num_lanes)?;
        let lanes_text = String::from_utf8(read("lanes", &name, "txt")?)
            .map_err(|_| Error::Data(format!("lanes/{name}.txt is not UTF-8")))?;
        let lanes = decode_lanes(&lanes_text, manifest.num_lanes)?;
        if image.shape() != [3, manifest.height, manifest.width]
            || label.height() != manifest.height
            || label.width() != manifest.width
        {
            return Err(Error::Data(format!("scene {name} does not match the manifest size")));
        }
        scenes.push(LaneScene { image, label, lanes });
    }
    Ok(Dataset { manifest, scenes })
}

/// Epoch-shuffled batch indices with optional flip flags. Batch `m` depends
/// only on `(seed, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64, flip: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if len == 0 {
            return Err(Error::Data("cannot sample batches from an empty dataset".into()));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            flip,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    fn epoch_order(&self, epoch: u64) -> (Vec<usize>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        let flips = (0..self.len).map(|_| self.flip && rng.random_bool(0.5)).collect();
        (order, flips)
    }

    /// `(scene index, flip)` pairs of batch `m`.
    pub fn batch_at(&self, m: u64) -> Vec<(usize, bool)> {
        let per = self.batches_per_epoch() as u64;
        let (order, flips) = self.epoch_order(m / per);
        let start = (m % per) as usize * self.batch_size;
        let end = (start + self.batch_size).min(self.len);
        (start..end).map(|i| (order[i], flips[i])).collect()
    }

    pub fn scenes_at(&self, scenes: &[LaneScene], m: u64) -> Vec<LaneScene> {
        self.batch_at(m)
            .into_iter()
            .map(|(i, f)| if f { scenes[i].flipped() } else { scenes[i].clone() })
            .collect()
    }
}

/// One shuffled epoch of batches.
pub fn make_batches<R: Rng + ?Sized>(
    scenes: &[LaneScene],
    batch_size: usize,
    flip: bool,
    rng: &mut R,
) -> Result<Vec<Vec<LaneScene>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| if flip && rng.random_bool(0.5) { scenes[i].flipped() } else { scenes[i].clone() })
                .collect()
        })
        .collect())
}
