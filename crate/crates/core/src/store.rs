//! Checkpoint files for every persisted artifact.
//!
//! Layout: ASCII header lines, the line `end`, then every tensor as
//! little-endian `f64` in header order, then an 8-byte little-endian
//! checksum (the first eight bytes of the SHA-256 of the tensor bytes).
//!
//! ```text
//! mrf-checkpoint v1
//! kind=learner
//! m=64
//! ...
//! tensor=w1:64x128
//! tensor=b1:128
//! end
//! ```
//!
//! A zero-dimensional tensor is written with the shape `-`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agm::{TraceRow, TrainState};
use crate::error::{Error, Result};
use crate::graph::{GraphStructure, LogPotentials};
use crate::nn::{Adam, DiscriminatorParams, LearnerParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "mrf-checkpoint";
pub const CHECKPOINT_VERSION: &str = "v1";

const MAX_HEADER_LINES: usize = 4096;
const MAX_DIMS: usize = 8;

/// Log-potentials together with the structure they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialsCheckpoint {
    pub n_nodes: usize,
    pub support_size: usize,
    pub n_edges: usize,
    /// Where the structure file lives, as given when saving.
    pub structure_ref: String,
    pub values: Vec<f64>,
}

impl PotentialsCheckpoint {
    pub fn new(structure: &GraphStructure, structure_ref: &str, psi: &LogPotentials) -> Self {
        PotentialsCheckpoint {
            n_nodes: structure.n_nodes(),
            support_size: structure.support_size(),
            n_edges: structure.n_edges(),
            structure_ref: structure_ref.to_string(),
            values: psi.values().to_vec(),
        }
    }

    /// The potentials, provided they fit `structure`.
    pub fn potentials_for(&self, structure: &GraphStructure) -> Result<LogPotentials> {
        if (self.n_nodes, self.support_size, self.n_edges)
            != (structure.n_nodes(), structure.support_size(), structure.n_edges())
        {
            return Err(Error::Shape(format!(
                "checkpoint for {} nodes, support {}, {} edges; structure has {}, {}, {}",
                self.n_nodes,
                self.support_size,
                self.n_edges,
                structure.n_nodes(),
                structure.support_size(),
                structure.n_edges()
            )));
        }
        LogPotentials::new(structure, self.values.clone())
    }
}

/// A learner plus the model dimensions it generates potentials for.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerCheckpoint {
    pub params: LearnerParams,
    pub n_vars: usize,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Structure(GraphStructure),
    Potentials(PotentialsCheckpoint),
    Learner(LearnerCheckpoint),
    Discriminator(DiscriminatorParams),
    TrainState(TrainState),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Structure(_) => "structure",
            Artifact::Potentials(_) => "potentials",
            Artifact::Learner(_) => "learner",
            Artifact::Discriminator(_) => "discriminator",
            Artifact::TrainState(_) => "trainstate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub artifact: Artifact,
    pub seed: Option<u64>,
    pub parent_run: Option<String>,
}

impl Checkpoint {
    pub fn new(artifact: Artifact) -> Self {
        Checkpoint {
            artifact,
            seed: None,
            parent_run: None,
        }
    }
}

struct Container {
    kind: String,
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.tensors.push((name.to_string(), t.clone()));
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(0, format!("missing header field {key}")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::parse(0, format!("invalid value `{v}` for {key}")))
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut head = format!("{CHECKPOINT_HEADER} {CHECKPOINT_VERSION}\nkind={}\n", self.kind);
        for (k, v) in &self.meta {
            if v.contains('\n') || k.contains(['\n', '=']) {
                return Err(Error::Input(format!("header field {k} cannot hold a newline")));
            }
            head.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            head.push_str(&format!("tensor={name}:{dims}\n"));
        }
        head.push_str("end\n");
        let mut blob = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&blob);
        let mut out = head.into_bytes();
        out.extend_from_slice(&blob);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = || -> Result<(usize, &str)> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(line_no + 1, "unterminated header"))?;
            let line =
                std::str::from_utf8(&rest[..nl]).map_err(|_| Error::parse(line_no + 1, "header is not UTF-8"))?;
            pos += nl + 1;
            line_no += 1;
            Ok((line_no, line))
        };
        let (_, first) = next_line()?;
        let (magic, version) = first
            .split_once(' ')
            .ok_or_else(|| Error::parse(1, "not a checkpoint file"))?;
        if magic != CHECKPOINT_HEADER {
            return Err(Error::parse(1, "not a checkpoint file"));
        }
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.into(),
                found: version.into(),
            });
        }
        let (ln, kind_line) = next_line()?;
        let kind = kind_line
            .strip_prefix("kind=")
            .ok_or_else(|| Error::parse(ln, "expected kind="))?
            .to_string();
        let mut c = Container::new(&kind);
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let (ln, line) = next_line()?;
            if ln > MAX_HEADER_LINES {
                return Err(Error::parse(ln, "header too long"));
            }
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(ln, format!("malformed header line `{line}`")))?;
            if k == "tensor" {
                let (name, dims) = v
                    .rsplit_once(':')
                    .ok_or_else(|| Error::parse(ln, "tensor line needs name:dims"))?;
                let shape: Vec<usize> = if dims == "-" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse().map_err(|_| Error::parse(ln, format!("bad dimension `{d}`"))))
                        .collect::<Result<_>>()?
                };
                if shape.len() > MAX_DIMS {
                    return Err(Error::parse(ln, "too many dimensions"));
                }
                shapes.push((name.to_string(), shape));
            } else {
                c.meta.push((k.to_string(), v.to_string()));
            }
        }
        let body = &bytes[pos..];
        if body.len() < 8 {
            return Err(Error::parse(line_no, "missing checksum"));
        }
        let (blob, tail) = body.split_at(body.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(blob);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut total: usize = 0;
        for (_, shape) in &shapes {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Shape("tensor size overflows".into()))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| Error::Shape("tensor size overflows".into()))?;
        }
        if total.checked_mul(8) != Some(blob.len()) {
            return Err(Error::Shape(format!(
                "header declares {total} values but the blob holds {} bytes",
                blob.len()
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            c.tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(c)
    }
}

fn checksum(blob: &[u8]) -> u64 {
    let digest = Sha256::digest(blob);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn put_adam(c: &mut Container, prefix: &str, opt: &Adam) {
    c.put(&format!("{prefix}.lr"), opt.lr);
    c.put(&format!("{prefix}.beta1"), opt.beta1);
    c.put(&format!("{prefix}.beta2"), opt.beta2);
    c.put(&format!("{prefix}.eps"), opt.eps);
    c.put(&format!("{prefix}.step"), opt.step);
    c.put(&format!("{prefix}.slots"), opt.m.len());
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        c.tensor(&format!("{prefix}.m{i}"), m);
        c.tensor(&format!("{prefix}.v{i}"), v);
    }
}

fn take_adam(c: &mut Container, prefix: &str) -> Result<Adam> {
    let slots: usize = c.get(&format!("{prefix}.slots"))?;
    if slots > 64 {
        return Err(Error::Shape("too many optimizer slots".into()));
    }
    let mut m = Vec::with_capacity(slots);
    let mut v = Vec::with_capacity(slots);
    for i in 0..slots {
        m.push(c.take(&format!("{prefix}.m{i}"))?);
        v.push(c.take(&format!("{prefix}.v{i}"))?);
    }
    Ok(Adam {
        lr: c.get(&format!("{prefix}.lr"))?,
        beta1: c.get(&format!("{prefix}.beta1"))?,
        beta2: c.get(&format!("{prefix}.beta2"))?,
        eps: c.get(&format!("{prefix}.eps"))?,
        step: c.get(&format!("{prefix}.step"))?,
        m,
        v,
    })
}

fn put_learner(c: &mut Container, prefix: &str, p: &LearnerParams) {
    c.put(&format!("{prefix}m"), p.latent_dim());
    c.put(&format!("{prefix}k"), p.output_dim());
    for (name, t) in p.named_tensors() {
        c.tensor(&format!("{prefix}{name}"), t);
    }
}

fn take_learner(c: &mut Container, prefix: &str) -> Result<LearnerParams> {
    let mut p = LearnerParams::zeros(0, 0);
    for (name, slot) in p.named_tensors_mut() {
        *slot = c.take(&format!("{prefix}{name}"))?;
    }
    shape_guard(p.w1.ndim() == 2 && p.w2.ndim() == 2, "learner weights must be matrices")?;
    p.validate()?;
    let (m, k): (usize, usize) = (c.get(&format!("{prefix}m"))?, c.get(&format!("{prefix}k"))?);
    shape_guard(
        (m, k) == (p.latent_dim(), p.output_dim()),
        "learner header dimensions disagree with its tensors",
    )?;
    Ok(p)
}

fn put_critic(c: &mut Container, prefix: &str, p: &DiscriminatorParams) {
    c.put(&format!("{prefix}input_dim"), p.input_dim());
    for (name, t) in p.named_tensors() {
        c.tensor(&format!("{prefix}{name}"), t);
    }
}

fn take_critic(c: &mut Container, prefix: &str) -> Result<DiscriminatorParams> {
    let mut p = DiscriminatorParams::zeros(0);
    for (name, slot) in p.named_tensors_mut() {
        *slot = c.take(&format!("{prefix}{name}"))?;
    }
    shape_guard(p.w1.ndim() == 2, "critic weights must be matrices")?;
    p.validate()?;
    let n: usize = c.get(&format!("{prefix}input_dim"))?;
    shape_guard(n == p.input_dim(), "critic header dimensions disagree with its tensors")?;
    Ok(p)
}

fn shape_guard(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(msg.into()))
    }
}

fn adam_matches(opt: &Adam, params: &[&mut Tensor]) -> bool {
    opt.m.len() == params.len()
        && opt
            .m
            .iter()
            .zip(&opt.v)
            .zip(params)
            .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::parse(0, "rng seed must be 64 hex digits");
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let a = &ckpt.artifact;
    let mut c = Container::new(a.kind());
    if let Some(seed) = ckpt.seed {
        c.put("seed", seed);
    }
    if let Some(parent) = &ckpt.parent_run {
        c.put("parent_run", parent);
    }
    match a {
        Artifact::Structure(g) => {
            c.put("n_nodes", g.n_nodes());
            c.put("support_size", g.support_size());
            let flat: Vec<f64> = g.edges().iter().flat_map(|&(i, j)| [i as f64, j as f64]).collect();
            c.tensor("edges", &Tensor::new(vec![g.n_edges(), 2], flat)?);
        }
        Artifact::Potentials(p) => {
            c.put("n_nodes", p.n_nodes);
            c.put("support_size", p.support_size);
            c.put("n_edges", p.n_edges);
            c.put("structure", &p.structure_ref);
            c.tensor("psi", &Tensor::new(vec![p.values.len()], p.values.clone())?);
        }
        Artifact::Learner(l) => {
            c.put("n_vars", l.n_vars);
            c.put("support_size", l.support_size);
            put_learner(&mut c, "", &l.params);
        }
        Artifact::Discriminator(d) => put_critic(&mut c, "", d),
        Artifact::TrainState(s) => {
            c.put("step", s.step);
            c.put("rng_seed", hex(&s.rng.get_seed()));
            c.put("rng_stream", s.rng.get_stream());
            c.put("rng_word_pos", s.rng.get_word_pos());
            put_learner(&mut c, "learner.", &s.learner);
            put_critic(&mut c, "critic.", &s.critic);
            put_adam(&mut c, "learner_opt", &s.learner_opt);
            put_adam(&mut c, "critic_opt", &s.critic_opt);
            let rows: Vec<f64> = s
                .trace
                .iter()
                .flat_map(|r| [r.step as f64, r.critic_loss, r.generator_loss, r.penalty])
                .collect();
            c.tensor("trace", &Tensor::new(vec![s.trace.len(), 4], rows)?);
        }
    }
    c.encode()
}

/// Parses a checkpoint, verifying version, checksum and shapes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Container::decode(bytes)?;
    let seed = match c.raw("seed") {
        Ok(_) => Some(c.get("seed")?),
        Err(_) => None,
    };
    let parent_run = c.raw("parent_run").ok().map(str::to_string);
    let artifact = match c.kind.as_str() {
        "structure" => {
            let edges = c.take("edges")?;
            shape_guard(edges.ndim() == 2 && edges.shape()[1] == 2, "edge table must be E x 2")?;
            let mut pairs = Vec::with_capacity(edges.shape()[0]);
            for e in edges.data().chunks(2) {
                let ok = e.iter().all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < 1e15);
                shape_guard(ok, "edge endpoints must be non-negative integers")?;
                pairs.push((e[0] as usize, e[1] as usize));
            }
            Artifact::Structure(GraphStructure::new(c.get("n_nodes")?, c.get("support_size")?, pairs)?)
        }
        "potentials" => {
            let p = PotentialsCheckpoint {
                n_nodes: c.get("n_nodes")?,
                support_size: c.get("support_size")?,
                n_edges: c.get("n_edges")?,
                structure_ref: c.raw("structure")?.to_string(),
                values: c.take("psi")?.into_data(),
            };
            let k = p
                .n_edges
                .checked_mul(p.support_size)
                .and_then(|v| v.checked_mul(p.support_size));
            shape_guard(k == Some(p.values.len()), "potential count disagrees with the header")?;
            Artifact::Potentials(p)
        }
        "learner" => {
            let params = take_learner(&mut c, "")?;
            Artifact::Learner(LearnerCheckpoint {
                params,
                n_vars: c.get("n_vars")?,
                support_size: c.get("support_size")?,
            })
        }
        "discriminator" => Artifact::Discriminator(take_critic(&mut c, "")?),
        "trainstate" => {
            let mut learner = take_learner(&mut c, "learner.")?;
            let mut critic = take_critic(&mut c, "critic.")?;
            let learner_opt = take_adam(&mut c, "learner_opt")?;
            let critic_opt = take_adam(&mut c, "critic_opt")?;
            shape_guard(
                adam_matches(&learner_opt, &learner.trainable_mut())
                    && adam_matches(&critic_opt, &critic.trainable_mut()),
                "optimizer moments do not match their parameters",
            )?;
            let trace_t = c.take("trace")?;
            shape_guard(trace_t.ndim() == 2 && trace_t.shape()[1] == 4, "trace must be T x 4")?;
            let trace = trace_t
                .data()
                .chunks(4)
                .map(|r| TraceRow {
                    step: r[0] as usize,
                    critic_loss: r[1],
                    generator_loss: r[2],
                    penalty: r[3],
                })
                .collect();
            let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(unhex32(c.raw("rng_seed")?)?);
            rng.set_stream(c.get("rng_stream")?);
            rng.set_word_pos(c.get("rng_word_pos")?);
            Artifact::TrainState(TrainState {
                learner,
                critic,
                learner_opt,
                critic_opt,
                step: c.get("step")?,
                trace,
                rng,
            })
        }
        other => {
            return Err(Error::Kind {
                expected: "a known artifact kind".into(),
                found: other.into(),
            })
        }
    };
    if let Some((name, _)) = c.tensors.first() {
        return Err(Error::Shape(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        artifact,
        seed,
        parent_run,
    })
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and requires a particular kind.
pub fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let c = load(path)?;
    if c.artifact.kind() != kind {
        return Err(Error::Kind {
            expected: kind.into(),
            found: c.artifact.kind().into(),
        });
    }
    Ok(c)
}

/// Loads log-potentials and checks them against `structure`.
pub fn load_potentials(path: &Path, structure: &GraphStructure) -> Result<LogPotentials> {
    match load_kind(path, "potentials")?.artifact {
        Artifact::Potentials(p) => p.potentials_for(structure),
        _ => unreachable!("kind checked"),
    }
}

pub fn load_learner(path: &Path) -> Result<LearnerCheckpoint> {
    match load_kind(path, "learner")?.artifact {
        Artifact::Learner(l) => Ok(l),
        _ => unreachable!("kind checked"),
    }
}
