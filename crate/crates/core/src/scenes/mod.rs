//! Synthetic multi-agent BEV worlds.
//!
//! A scene is a set of non-overlapping axis-aligned boxes observed by `N`
//! agents. Each agent sees the perimeter points of boxes within its sensor
//! range (dropped with a distance-dependent miss probability, jittered by
//! Gaussian noise) plus random clutter, rasterised into two channels:
//! point counts and the normalised range of the nearest point in each cell.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxAA, GridGeometry};
use crate::TensorF;

/// Observation channels: point count and nearest-point range.
pub const OBS_CHANNELS: usize = 2;
/// Give up placing boxes after this many rejected draws per scene.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub const DATASET_MAGIC: &str = "COPEFT-DS";
pub const DATASET_VERSION: u32 = 1;

/// Generative parameters of one sensing domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Metres per observation cell.
    pub cell_size: f64,
    /// Poisson mean of the object count.
    pub objects_mean: f64,
    /// Box extent along x.
    pub width_mean: f64,
    pub width_std: f64,
    /// Box extent along y.
    pub length_mean: f64,
    pub length_std: f64,
    /// Agents per scene, drawn uniformly from this inclusive range. The ego
    /// sits at the origin, the others uniformly inside the extent.
    pub agents_min: usize,
    pub agents_max: usize,
    /// Boxes whose centre is farther than this from an agent are invisible to it.
    pub sensor_range: f64,
    /// Points sampled on each of the four box edges.
    pub points_per_edge: usize,
    /// Standard deviation of the per-point Gaussian jitter (metres).
    pub point_noise_std: f64,
    /// Miss probability per metre of distance, capped at 1.
    pub miss_slope: f64,
    /// Probability of a clutter point in each in-range cell.
    pub clutter_rate: f64,
    pub seed: u64,
}

impl DomainConfig {
    /// Training domain: low noise, sparse clutter.
    pub fn domain_a() -> Self {
        Self {
            x_min: -32.0,
            x_max: 32.0,
            y_min: -16.0,
            y_max: 16.0,
            cell_size: 1.0,
            objects_mean: 4.0,
            width_mean: 4.8,
            width_std: 0.6,
            length_mean: 8.8,
            length_std: 0.8,
            agents_min: 2,
            agents_max: 3,
            sensor_range: 40.0,
            points_per_edge: 8,
            point_noise_std: 0.05,
            miss_slope: 0.01,
            clutter_rate: 0.001,
            seed: 0,
        }
    }

    /// Deployment domain: five times the point noise, ten times the clutter,
    /// boxes 25% larger and 50% more of them.
    pub fn domain_b() -> Self {
        let a = Self::domain_a();
        Self {
            objects_mean: a.objects_mean * 1.5,
            width_mean: a.width_mean * 1.25,
            width_std: a.width_std * 1.25,
            length_mean: a.length_mean * 1.25,
            length_std: a.length_std * 1.25,
            point_noise_std: 0.25,
            clutter_rate: 0.01,
            ..a
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "domain_a" | "a" => Some(Self::domain_a()),
            "domain_b" | "b" => Some(Self::domain_b()),
            _ => None,
        }
    }

    /// A preset name, or the path of a JSON-encoded config.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let cfg: Self = serde_json::from_reader(BufReader::new(File::open(spec)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> GridGeometry {
        GridGeometry {
            x_min: self.x_min,
            y_min: self.y_min,
            cell_size: self.cell_size,
            rows: ((self.y_max - self.y_min) / self.cell_size).round() as usize,
            cols: ((self.x_max - self.x_min) / self.cell_size).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain: {m}")));
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return bad("extent must be positive");
        }
        if !(self.cell_size > 0.0) {
            return bad("cell_size must be positive");
        }
        for (name, span) in [("x", self.x_max - self.x_min), ("y", self.y_max - self.y_min)] {
            let cells = span / self.cell_size;
            if (cells - cells.round()).abs() > 1e-9 {
                return bad(&format!("cell_size does not divide the {name} extent"));
            }
        }
        let rates = [
            ("objects_mean", self.objects_mean),
            ("width_std", self.width_std),
            ("length_std", self.length_std),
            ("sensor_range", self.sensor_range),
            ("point_noise_std", self.point_noise_std),
            ("miss_slope", self.miss_slope),
            ("clutter_rate", self.clutter_rate),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.width_mean > 0.0 && self.length_mean > 0.0) {
            return bad("box size means must be positive");
        }
        if self.clutter_rate > 1.0 {
            return bad("clutter_rate is a per-cell probability");
        }
        if self.agents_min == 0 || self.agents_max < self.agents_min {
            return bad("agent count range must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

impl FromStr for DomainConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::load(s)
    }
}

/// One frame: ground truth, agent positions and per-agent observations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub boxes: Vec<BoxAA>,
    /// Agent positions; index 0 is the ego.
    pub agents: Vec<(f64, f64)>,
    /// `[2, H0, W0]` per agent.
    pub grids: Vec<TensorF>,
}

/// Random stream of frame `index` in a dataset seeded with `seed`.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn positive_normal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    let v = if std > 0.0 { Normal::new(mean, std).expect("valid normal").sample(rng) } else { mean };
    v.max(0.25 * mean)
}

/// Draws the object layout and renders every agent's observation.
pub fn sample_scene<R: Rng + ?Sized>(cfg: &DomainConfig, rng: &mut R) -> Result<SceneSample> {
    cfg.validate()?;
    let count = if cfg.objects_mean > 0.0 {
        Poisson::new(cfg.objects_mean).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let mut boxes: Vec<BoxAA> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::SamplingExhausted(MAX_PLACEMENT_ATTEMPTS));
        }
        let w = positive_normal(cfg.width_mean, cfg.width_std, rng);
        let l = positive_normal(cfg.length_mean, cfg.length_std, rng);
        if w >= cfg.x_max - cfg.x_min || l >= cfg.y_max - cfg.y_min {
            continue;
        }
        let cx = rng.random_range(cfg.x_min + 0.5 * w..cfg.x_max - 0.5 * w);
        let cy = rng.random_range(cfg.y_min + 0.5 * l..cfg.y_max - 0.5 * l);
        let b = BoxAA::new(cx, cy, w, l);
        if boxes.iter().all(|o| o.intersection(&b) <= 0.0) {
            boxes.push(b);
        }
    }

    let n = rng.random_range(cfg.agents_min..=cfg.agents_max);
    let mut agents = vec![(0.0, 0.0)];
    for _ in 1..n {
        agents.push((rng.random_range(cfg.x_min..cfg.x_max), rng.random_range(cfg.y_min..cfg.y_max)));
    }
    let mut scene = SceneSample { boxes, agents, grids: Vec::with_capacity(n) };
    for a in 0..n {
        let g = render_observation(&scene, a, cfg, rng)?;
        scene.grids.push(g);
    }
    Ok(scene)
}

/// Points agent `agent` perceives, in world coordinates.
pub fn sense_points<R: Rng + ?Sized>(
    scene: &SceneSample,
    agent: usize,
    cfg: &DomainConfig,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let &(ax, ay) = scene
        .agents
        .get(agent)
        .ok_or_else(|| Error::Config(format!("agent {agent} out of range ({} agents)", scene.agents.len())))?;
    let noise = (cfg.point_noise_std > 0.0).then(|| Normal::new(0.0, cfg.point_noise_std).expect("valid normal"));
    let mut pts = Vec::new();
    for b in &scene.boxes {
        let dist = (b.cx - ax).hypot(b.cy - ay);
        if dist > cfg.sensor_range {
            continue;
        }
        if rng.random_bool((cfg.miss_slope * dist).min(1.0)) {
            continue;
        }
        let corners = [(b.x0(), b.y0()), (b.x1(), b.y0()), (b.x1(), b.y1()), (b.x0(), b.y1())];
        for e in 0..4 {
            let (p, q) = (corners[e], corners[(e + 1) % 4]);
            for _ in 0..cfg.points_per_edge {
                let t: f64 = rng.random_range(0.0..1.0);
                let (mut x, mut y) = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
                if let Some(n) = &noise {
                    x += n.sample(rng);
                    y += n.sample(rng);
                }
                pts.push((x, y));
            }
        }
    }
    if cfg.clutter_rate > 0.0 {
        let g = cfg.grid();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let (x, y) = g.cell_center(r, c);
                if (x - ax).hypot(y - ay) > cfg.sensor_range || !rng.random_bool(cfg.clutter_rate) {
                    continue;
                }
                let ox: f64 = rng.random_range(-0.5..0.5);
                let oy: f64 = rng.random_range(-0.5..0.5);
                pts.push((x + ox * g.cell_size, y + oy * g.cell_size));
            }
        }
    }
    Ok(pts)
}

/// Rasterises what agent `agent` senses into `[2, H0, W0]`: channel 0 counts
/// points, channel 1 holds the nearest point's range divided by the sensor
/// range (0 in empty cells).
pub fn render_observation<R: Rng + ?Sized>(
    scene: &SceneSample,
    agent: usize,
    cfg: &DomainConfig,
    rng: &mut R,
) -> Result<TensorF> {
    let pts = sense_points(scene, agent, cfg, rng)?;
    let (ax, ay) = scene.agents[agent];
    let g = cfg.grid();
    let plane = g.rows * g.cols;
    let mut out = TensorF::zeros(&[OBS_CHANNELS, g.rows, g.cols]);
    let d = out.data_mut();
    let range_scale = if cfg.sensor_range > 0.0 { cfg.sensor_range } else { 1.0 };
    for (x, y) in pts {
        let Some((r, c)) = g.locate(x, y) else { continue };
        let cell = r * g.cols + c;
        let rho = (x - ax).hypot(y - ay) / range_scale;
        if d[cell] == 0.0 || rho < d[plane + cell] {
            d[plane + cell] = rho;
        }
        d[cell] += 1.0;
    }
    Ok(out)
}

/// `count` frames, frame `i` drawn from stream `i` of `cfg.seed`.
pub fn generate_dataset(cfg: &DomainConfig, count: usize) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (0..count).map(|i| sample_scene(cfg, &mut frame_rng(cfg.seed, i as u64))).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    cfg: DomainConfig,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    boxes: Vec<[f64; 4]>,
    agents: Vec<[f64; 2]>,
    grids: Vec<GridRecord>,
}

/// Writes the JSON-lines dataset: a header line, then one line per frame.
pub fn write_dataset_to<W: Write>(samples: &[SceneSample], cfg: &DomainConfig, mut out: W) -> Result<()> {
    let header = Header { magic: DATASET_MAGIC.into(), version: DATASET_VERSION, cfg: cfg.clone(), count: samples.len() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        let rec = FrameRecord {
            boxes: s.boxes.iter().map(BoxAA::to_array).collect(),
            agents: s.agents.iter().map(|&(x, y)| [x, y]).collect(),
            grids: s.grids.iter().map(|g| GridRecord { shape: g.shape().to_vec(), data: g.data().to_vec() }).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(samples: &[SceneSample], cfg: &DomainConfig, path: impl AsRef<Path>) -> Result<()> {
    write_dataset_to(samples, cfg, BufWriter::new(File::create(path)?))
}

pub fn read_dataset_from<R: BufRead>(input: R) -> Result<(Vec<SceneSample>, DomainConfig)> {
    let mut lines = input.lines();
    let err = |line: usize, msg: String| Error::Dataset { line, msg };
    let first = lines.next().ok_or_else(|| err(1, "empty file".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| err(1, format!("malformed header: {e}")))?;
    if header.magic != DATASET_MAGIC {
        return Err(err(1, format!("bad magic `{}`", header.magic)));
    }
    if header.version != DATASET_VERSION {
        return Err(err(1, format!("unsupported version {}", header.version)));
    }
    header.cfg.validate().map_err(|e| err(1, e.to_string()))?;
    let mut samples = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let line_no = i + 2;
        let line = match lines.next() {
            Some(l) => l?,
            None => return Err(err(line_no, format!("truncated: expected {} frames, found {i}", header.count))),
        };
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| err(line_no, format!("malformed frame: {e}")))?;
        let grids = rec
            .grids
            .into_iter()
            .map(|g| TensorF::new(g.shape, g.data))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(line_no, e.to_string()))?;
        if grids.len() != rec.agents.len() || rec.agents.is_empty() {
            return Err(err(line_no, format!("{} agents but {} grids", rec.agents.len(), grids.len())));
        }
        samples.push(SceneSample {
            boxes: rec.boxes.into_iter().map(BoxAA::from_array).collect(),
            agents: rec.agents.into_iter().map(|[x, y]| (x, y)).collect(),
            grids,
        });
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(err(header.count + 2, "more frames than the header count".into()));
        }
    }
    Ok((samples, header.cfg))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(Vec<SceneSample>, DomainConfig)> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
