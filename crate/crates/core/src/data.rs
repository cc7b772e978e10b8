//! Synthetic re-identification data, manifests and PK batch sampling.
//!
//! Identity labels are scoped to one action: a sample's identity is the pair
//! `(action_id, pid)` and pids from different actions are never compared.
//!
//! # Manifest format
//!
//! UTF-8 text, one record per line, tab-separated in the fixed order
//! `sample_id action_id pid role tensor_path`. Lines starting with `#` are
//! header lines; the first three are required:
//!
//! ```text
//! # partreid-manifest v1
//! # image 3x64x32
//! # counts samples=2 query=1 gallery=1 train=0
//! 0	0	0	query	tensors/000000.tsr
//! 1	0	0	gallery	tensors/000001.tsr
//! ```
//!
//! `tensor_path` is relative to the manifest's directory and names a TSR1
//! image tensor of the declared shape.

#![allow(clippy::tabs_in_doc_comments)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::IdentityKey;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Query,
    Gallery,
    Train,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
            Role::Train => "train",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            "train" => Ok(Role::Train),
            other => Err(Error::Config(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: u64,
    pub action_id: u32,
    pub pid: u32,
    pub role: Role,
    pub tensor_path: PathBuf,
}

impl Sample {
    pub fn identity(&self) -> IdentityKey {
        (self.action_id, self.pid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    /// `(channels, H, W)` of every image tensor.
    pub image_shape: (usize, usize, usize),
    pub records: Vec<Sample>,
    /// Directory that relative tensor paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn count(&self, role: Role) -> usize {
        self.records.iter().filter(|s| s.role == role).count()
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Sample> {
        self.records.iter().filter(move |s| s.role == role)
    }

    pub fn tensor_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.tensor_path)
    }

    pub fn load_image(&self, sample: &Sample) -> Result<Tensor> {
        let t = Tensor::load_tsr1(self.tensor_path(sample))?;
        let (c, h, w) = self.image_shape;
        if t.shape() != [c, h, w] {
            return Err(Error::format(
                self.tensor_path(sample),
                format!("image has shape {:?}, manifest declares {c}×{h}×{w}", t.shape()),
            ));
        }
        Ok(t)
    }

    /// Loads every image whose role passes `filter`, keyed by sample id.
    pub fn load_images(&self, filter: impl Fn(Role) -> bool) -> Result<HashMap<u64, Tensor>> {
        self.records
            .iter()
            .filter(|s| filter(s.role))
            .map(|s| Ok((s.sample_id, self.load_image(s)?)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.image_shape;
        let mut out = format!(
            "# partreid-manifest v{}\n# image {c}x{h}x{w}\n# counts samples={} query={} gallery={} train={}\n",
            self.version,
            self.records.len(),
            self.count(Role::Query),
            self.count(Role::Gallery),
            self.count(Role::Train)
        );
        for s in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.sample_id,
                s.action_id,
                s.pid,
                s.role,
                s.tensor_path.display()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses without touching tensor files.
    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().enumerate();
        let mut header = |expect: &str| -> Result<String> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("missing `# {expect}` header")))?;
            line.strip_prefix("# ")
                .and_then(|l| l.strip_prefix(expect))
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::format(path, format!("line {}: expected `# {expect} …`", i + 1)))
        };
        let version: u32 = header("partreid-manifest v")?
            .parse()
            .map_err(|_| Error::format(path, "bad manifest version"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {version}")));
        }
        let dims: Vec<usize> = header("image")?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::format(path, "bad image shape")))
            .collect::<Result<_>>()?;
        let &[c, h, w] = dims.as_slice() else {
            return Err(Error::format(path, "image shape needs three extents"));
        };
        let counts = header("counts")?;
        let declared: HashMap<&str, usize> = counts
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
            .collect();

        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, action, pid, role, tensor] = fields[..] else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            records.push(Sample {
                sample_id: id.parse().map_err(|_| bad("bad sample_id"))?,
                action_id: action.parse().map_err(|_| bad("bad action_id"))?,
                pid: pid.parse().map_err(|_| bad("bad pid"))?,
                role: role.parse().map_err(|_| bad("bad role"))?,
                tensor_path: PathBuf::from(tensor),
            });
        }
        let manifest = Manifest {
            version,
            image_shape: (c, h, w),
            records,
            root,
        };
        if declared.get("samples") != Some(&manifest.records.len()) {
            return Err(Error::format(path, "declared sample count does not match the records"));
        }
        Ok(manifest)
    }

    /// Every invariant violation, each naming the offending record index.
    pub fn violations(&self, check_tensors: bool) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (i, s) in self.records.iter().enumerate() {
            if !seen.insert(s.sample_id) {
                problems.push(format!("record {i}: duplicate sample_id {}", s.sample_id));
            }
            if check_tensors {
                let path = self.tensor_path(s);
                if !path.is_file() {
                    problems.push(format!(
                        "record {i}: sample {} tensor file {} is missing",
                        s.sample_id,
                        path.display()
                    ));
                } else if let Err(e) = self.load_image(s) {
                    problems.push(format!("record {i}: sample {}: {e}", s.sample_id));
                }
            }
        }
        let gallery: HashSet<IdentityKey> = self.with_role(Role::Gallery).map(Sample::identity).collect();
        for (i, s) in self.records.iter().enumerate() {
            if s.role == Role::Query && !gallery.contains(&s.identity()) {
                problems.push(format!(
                    "record {i}: query sample {} (action {}, pid {}) has no gallery match in its action",
                    s.sample_id, s.action_id, s.pid
                ));
            }
        }
        problems
    }
}

/// Reads and fully validates a manifest, including every tensor file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text, path)?;
    let problems = manifest.violations(true);
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Validation(problems))
    }
}

/// Which roles the generator assigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// View 0 of every identity is a query, the remaining views are gallery.
    Eval,
    /// Every view is a training sample.
    Train,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval" => Ok(SplitMode::Eval),
            "train" => Ok(SplitMode::Train),
            other => Err(Error::Config(format!("unknown split `{other}` (expected eval|train)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub num_actions: usize,
    pub ids_per_action: usize,
    pub views_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split: SplitMode,
    /// Extra gallery-only identities per action (eval split only).
    pub distractors_per_action: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            num_actions: 20,
            ids_per_action: 10,
            views_per_id: 6,
            height: 64,
            width: 32,
            seed: 0,
            split: SplitMode::Eval,
            distractors_per_action: 0,
        }
    }
}

/// splitmix64 finalizer, used to derive independent rng seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed ^ tag).wrapping_add(a)).wrapping_add(b)))
}

type Rgb = [f64; 3];

/// Latent description of one player.
#[derive(Debug, Clone)]
struct Identity {
    jersey: Rgb,
    shorts: Rgb,
    socks: Rgb,
    skin: Rgb,
    patch: Rgb,
    /// Fraction of the image height the player occupies.
    height: f64,
    /// Torso half-width in pixels at unit scale.
    build: f64,
    /// Base arm and leg spread.
    arm_angle: f64,
    leg_angle: f64,
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

fn jitter_color<R: Rng>(base: Rgb, amount: f64, rng: &mut R) -> Rgb {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

impl Identity {
    fn draw(seed: u64, action: u32, pid: u32, team_colors: &[Rgb; 2]) -> Identity {
        let mut rng = derived_rng(seed, 0x1d, action as u64, pid as u64);
        let team = (pid % 2) as usize;
        Identity {
            jersey: jitter_color(team_colors[team], 0.2, &mut rng),
            shorts: random_color(&mut rng),
            socks: random_color(&mut rng),
            skin: jitter_color([0.75, 0.55, 0.4], 0.2, &mut rng),
            patch: random_color(&mut rng),
            height: rng.gen_range(0.78..0.92),
            build: rng.gen_range(4.0..7.0),
            arm_angle: rng.gen_range(0.1..0.6),
            leg_angle: rng.gen_range(0.05..0.35),
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    fn put(&mut self, y: usize, x: usize, color: Rgb) {
        for (c, v) in color.iter().enumerate() {
            self.data[(c * self.h + y) * self.w + x] = *v;
        }
    }

    fn rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, color: Rgb) {
        for y in 0..self.h {
            let yc = y as f64 + 0.5;
            if yc < y0 || yc >= y1 {
                continue;
            }
            for x in 0..self.w {
                let xc = x as f64 + 0.5;
                if xc >= x0 && xc < x1 {
                    self.put(y, x, color);
                }
            }
        }
    }

    /// Thick line segment from `(y0, x0)` to `(y1, x1)`.
    fn segment(&mut self, (y0, x0): (f64, f64), (y1, x1): (f64, f64), thickness: f64, color: Rgb) {
        let (dy, dx) = (y1 - y0, x1 - x0);
        let len2 = (dy * dy + dx * dx).max(1e-9);
        for y in 0..self.h {
            for x in 0..self.w {
                let (py, px) = (y as f64 + 0.5 - y0, x as f64 + 0.5 - x0);
                let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
                let (ey, ex) = (py - t * dy, px - t * dx);
                if (ey * ey + ex * ex).sqrt() <= thickness / 2.0 {
                    self.put(y, x, color);
                }
            }
        }
    }

    fn disk(&mut self, cy: f64, cx: f64, r: f64, color: Rgb) {
        self.segment((cy, cx), (cy, cx), 2.0 * r, color);
    }
}

/// Renders one view of `id`: background clutter, perturbed pose, scale and
/// placement, illumination gain and pixel noise.
fn render(id: &Identity, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut canvas = Canvas::new(h, w);
    let grass = [
        rng.gen_range(0.1..0.35),
        rng.gen_range(0.35..0.7),
        rng.gen_range(0.1..0.3),
    ];
    canvas.rect(0.0, h as f64, 0.0, w as f64, grass);
    for _ in 0..rng.gen_range(0..3) {
        let (y0, x0) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (bh, bw) = (rng.gen_range(0.06..0.5) * h as f64, rng.gen_range(0.1..0.5) * w as f64);
        canvas.rect(y0, y0 + bh, x0, x0 + bw, random_color(rng));
    }

    let sy = h as f64 / 64.0;
    let sx = w as f64 / 32.0;
    let scale = rng.gen_range(0.9..1.05);
    let body = id.height * h as f64 * scale;
    let feet = h as f64 * rng.gen_range(0.93..0.99);
    let top = feet - body;
    let cx = w as f64 / 2.0 + rng.gen_range(-2.0..2.0) * sx;
    let at = |frac: f64| top + frac * body;
    let half = id.build * sx * scale;
    let arm = id.arm_angle + rng.gen_range(-0.15..0.15);
    let leg = id.leg_angle + rng.gen_range(-0.1..0.1);
    let limb = 2.5 * sx.min(sy).max(0.5) * scale;

    // legs and socks
    for side in [-1.0, 1.0] {
        let hip = (at(0.62), cx + side * half * 0.5);
        let knee = (at(0.8), hip.1 + side * leg * body * 0.18);
        let ankle = (at(0.97), knee.1 + side * leg * body * 0.1);
        canvas.segment(hip, knee, limb, id.skin);
        canvas.segment(knee, ankle, limb, id.socks);
    }
    canvas.rect(at(0.52), at(0.66), cx - half, cx + half, id.shorts);
    // arms
    for side in [-1.0, 1.0] {
        let shoulder = (at(0.2), cx + side * half);
        let hand = (at(0.5), shoulder.1 + side * arm * body * 0.3);
        canvas.segment(shoulder, hand, limb, id.jersey);
        canvas.disk(hand.0, hand.1, limb * 0.5, id.skin);
    }
    canvas.rect(at(0.17), at(0.53), cx - half, cx + half, id.jersey);
    canvas.rect(at(0.27), at(0.4), cx - half * 0.45, cx + half * 0.45, id.patch);
    canvas.disk(at(0.1), cx, body * 0.075, id.skin);

    let gain = rng.gen_range(0.85..1.15);
    canvas
        .data
        .into_iter()
        .map(|v| (v * gain + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0))
        .collect()
}

/// Writes a synthetic dataset (tensors plus `manifest.tsv`) into `out_dir`.
pub fn generate_synthetic(opts: &SynthOptions, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if opts.num_actions < 1 || opts.ids_per_action < 1 {
        return Err(Error::Config(
            "need at least one action and one identity per action".into(),
        ));
    }
    if opts.views_per_id < 2 {
        return Err(Error::Config(format!(
            "each identity needs at least 2 views, got {}",
            opts.views_per_id
        )));
    }
    if opts.height < 8 || opts.width < 4 {
        return Err(Error::Config(format!(
            "image {}×{} is too small to render",
            opts.height, opts.width
        )));
    }
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut records = Vec::new();
    let mut next_id = 0u64;
    for action in 0..opts.num_actions as u32 {
        let mut team_rng = derived_rng(opts.seed, 0x7e, action as u64, 0);
        let teams = [random_color(&mut team_rng), random_color(&mut team_rng)];
        let distractors = match opts.split {
            SplitMode::Eval => opts.distractors_per_action,
            SplitMode::Train => 0,
        };
        let total_ids = opts.ids_per_action + distractors;
        for pid in 0..total_ids as u32 {
            let identity = Identity::draw(opts.seed, action, pid, &teams);
            let is_distractor = pid as usize >= opts.ids_per_action;
            let views = if is_distractor { 1 } else { opts.views_per_id };
            for view in 0..views {
                let sample_id = next_id;
                next_id += 1;
                let role = match (opts.split, view, is_distractor) {
                    (SplitMode::Train, _, _) => Role::Train,
                    (SplitMode::Eval, 0, false) => Role::Query,
                    (SplitMode::Eval, _, _) => Role::Gallery,
                };
                let mut rng = derived_rng(opts.seed, 0x5a, sample_id, 0);
                let pixels = render(&identity, opts.height, opts.width, &mut rng);
                let tensor = Tensor::new(vec![3, opts.height, opts.width], pixels)?;
                let rel = PathBuf::from("tensors").join(format!("{sample_id:06}.tsr"));
                tensor.save_tsr1(out_dir.join(&rel))?;
                records.push(Sample {
                    sample_id,
                    action_id: action,
                    pid,
                    role,
                    tensor_path: rel,
                });
            }
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_shape: (3, opts.height, opts.width),
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// `P` identities × `K` samples, identity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PKBatch {
    pub p: usize,
    pub k: usize,
    pub samples: Vec<Sample>,
}

/// Training identities of a manifest in deterministic order.
pub fn train_identities(manifest: &Manifest) -> BTreeMap<IdentityKey, Vec<&Sample>> {
    let mut groups: BTreeMap<IdentityKey, Vec<&Sample>> = BTreeMap::new();
    for s in manifest.with_role(Role::Train) {
        groups.entry(s.identity()).or_default().push(s);
    }
    groups
}

/// Draws `P` distinct training identities uniformly, then `K` of each
/// identity's samples: without replacement when it has at least `K`, with
/// replacement otherwise.
pub fn sample_pk_batch<R: Rng + ?Sized>(manifest: &Manifest, p: usize, k: usize, rng: &mut R) -> Result<PKBatch> {
    if p == 0 || k == 0 {
        return Err(Error::Config(format!("P and K must be positive, got P={p} K={k}")));
    }
    let groups: Vec<Vec<&Sample>> = train_identities(manifest).into_values().collect();
    if groups.len() < p {
        return Err(Error::Config(format!(
            "batch needs {p} training identities but the manifest has {}",
            groups.len()
        )));
    }
    let mut samples = Vec::with_capacity(p * k);
    for gi in index::sample(rng, groups.len(), p) {
        let group = &groups[gi];
        if group.len() >= k {
            samples.extend(index::sample(rng, group.len(), k).into_iter().map(|i| group[i].clone()));
        } else {
            samples.extend((0..k).map(|_| group[rng.gen_range(0..group.len())].clone()));
        }
    }
    Ok(PKBatch { p, k, samples })
}
