//! Datasets, value encodings, and graymap image import.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gibbs::{self, GibbsConfig};
use crate::graph::{brute_force_joint, GraphStructure, LogPotentials, DEFAULT_STATE_CAP};
use crate::tensor::Tensor;

pub const DATA_HEADER: &str = "mrf-data v1";

/// Row-major data values.
#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    /// Discrete values below the support size.
    Int(Vec<usize>),
    /// Probabilities of value 1 for binary variables.
    Soft(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_vars: usize,
    support_size: usize,
    values: Values,
    image_shape: Option<(usize, usize)>,
    split: Option<String>,
}

impl Dataset {
    pub fn new(n_vars: usize, support_size: usize, values: Values) -> Result<Self> {
        let d = Dataset {
            n_vars,
            support_size,
            values,
            image_shape: None,
            split: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn from_rows(rows: &[Vec<usize>], support_size: usize) -> Result<Self> {
        let n_vars = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_vars) {
            return Err(Error::Shape("ragged data rows".into()));
        }
        Self::new(n_vars, support_size, Values::Int(rows.concat()))
    }

    pub fn with_image_shape(mut self, shape: (usize, usize)) -> Result<Self> {
        if shape.0 * shape.1 != self.n_vars {
            return Err(Error::Shape(format!(
                "{}x{} image for {} variables",
                shape.0, shape.1, self.n_vars
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = Some(split.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vars == 0 || self.support_size == 0 {
            return Err(Error::Input("n_vars and support_size must be positive".into()));
        }
        let len = match &self.values {
            Values::Int(v) => {
                if let Some(x) = v.iter().find(|&&x| x >= self.support_size) {
                    return Err(Error::Index(format!("value {x} outside support {}", self.support_size)));
                }
                v.len()
            }
            Values::Soft(v) => {
                if self.support_size != 2 {
                    return Err(Error::Input("soft data needs support size 2".into()));
                }
                if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Input("soft values must lie in [0, 1]".into()));
                }
                v.len()
            }
        };
        if len % self.n_vars != 0 {
            return Err(Error::Shape(format!("{len} values for rows of {}", self.n_vars)));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn n_points(&self) -> usize {
        match &self.values {
            Values::Int(v) => v.len() / self.n_vars,
            Values::Soft(v) => v.len() / self.n_vars,
        }
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn split(&self) -> Option<&str> {
        self.split.as_deref()
    }

    pub fn is_soft(&self) -> bool {
        matches!(self.values, Values::Soft(_))
    }

    /// Row `i` of an integer dataset.
    pub fn row(&self, i: usize) -> Result<&[usize]> {
        match &self.values {
            Values::Int(v) => Ok(&v[i * self.n_vars..(i + 1) * self.n_vars]),
            Values::Soft(_) => Err(Error::Input("soft dataset has no discrete rows".into())),
        }
    }

    /// Rows `indices`, each expanded to `n_vars * support_size` columns:
    /// one-hot blocks for integer data, `(1 - v, v)` blocks for soft data.
    pub fn encode_rows(&self, indices: &[usize]) -> Tensor {
        let (n, s) = (self.n_vars, self.support_size);
        let mut out = vec![0.0; indices.len() * n * s];
        for (r, &i) in indices.iter().enumerate() {
            let dst = &mut out[r * n * s..(r + 1) * n * s];
            match &self.values {
                Values::Int(v) => {
                    for (j, &x) in v[i * n..(i + 1) * n].iter().enumerate() {
                        dst[j * s + x] = 1.0;
                    }
                }
                Values::Soft(v) => {
                    for (j, &p) in v[i * n..(i + 1) * n].iter().enumerate() {
                        dst[2 * j] = 1.0 - p;
                        dst[2 * j + 1] = p;
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), n * s], out).expect("shape")
    }

    /// The points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.n_vars;
        let values = match &self.values {
            Values::Int(v) => Values::Int(
                indices
                    .iter()
                    .flat_map(|&i| v[i * n..(i + 1) * n].iter().copied())
                    .collect(),
            ),
            Values::Soft(v) => Values::Soft(
                indices
                    .iter()
                    .flat_map(|&i| v[i * n..(i + 1) * n].iter().copied())
                    .collect(),
            ),
        };
        Dataset { values, ..self.clone() }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{DATA_HEADER}").unwrap();
        let kind = if self.is_soft() { "soft" } else { "int" };
        write!(
            s,
            "n_vars={},support_size={},kind={kind}",
            self.n_vars, self.support_size
        )
        .unwrap();
        if let Some((h, w)) = self.image_shape {
            write!(s, ",shape={h}x{w}").unwrap();
        }
        if let Some(split) = &self.split {
            write!(s, ",split={split}").unwrap();
        }
        s.push('\n');
        for i in 0..self.n_points() {
            let r = i * self.n_vars..(i + 1) * self.n_vars;
            let cells: Vec<String> = match &self.values {
                Values::Int(v) => v[r].iter().map(|x| x.to_string()).collect(),
                Values::Soft(v) => v[r].iter().map(|x| x.to_string()).collect(),
            };
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == DATA_HEADER => {}
            Some((n, _)) => return Err(Error::parse(n, format!("expected `{DATA_HEADER}`"))),
            None => return Err(Error::parse(1, "empty file")),
        }
        let (hl, meta) = lines.next().ok_or_else(|| Error::parse(2, "missing metadata line"))?;
        let (mut n_vars, mut support, mut soft, mut shape, mut split) = (None, None, None, None, None);
        for field in meta.trim_end().split(',') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(hl, format!("malformed field `{field}`")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::parse(hl, format!("bad {k} `{v}`")))
            };
            match k {
                "n_vars" => n_vars = Some(num(v)?),
                "support_size" => support = Some(num(v)?),
                "kind" => {
                    soft = Some(match v {
                        "int" => false,
                        "soft" => true,
                        _ => return Err(Error::parse(hl, format!("unknown kind `{v}`"))),
                    })
                }
                "shape" => {
                    let (h, w) = v.split_once('x').ok_or_else(|| Error::parse(hl, "shape must be HxW"))?;
                    shape = Some((num(h)?, num(w)?));
                }
                "split" => split = Some(v.to_string()),
                _ => return Err(Error::parse(hl, format!("unknown field `{k}`"))),
            }
        }
        let missing = |f: &str| Error::parse(hl, format!("missing field {f}"));
        let n_vars = n_vars.ok_or_else(|| missing("n_vars"))?;
        let support = support.ok_or_else(|| missing("support_size"))?;
        let soft = soft.ok_or_else(|| missing("kind"))?;
        if n_vars == 0 || support == 0 {
            return Err(Error::parse(hl, "n_vars and support_size must be positive"));
        }
        if soft && support != 2 {
            return Err(Error::parse(hl, "soft data needs support_size=2"));
        }
        let (mut ints, mut reals) = (Vec::new(), Vec::new());
        for (ln, line) in lines {
            let cells: Vec<&str> = line.trim_end().split(',').collect();
            if cells.len() != n_vars {
                return Err(Error::parse(ln, format!("{} values, expected {n_vars}", cells.len())));
            }
            for c in cells {
                if soft {
                    let v: f64 = c
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(ln, format!("bad value `{c}`")))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::parse(ln, format!("value {v} outside [0, 1]")));
                    }
                    reals.push(v);
                } else {
                    let v: usize = c
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(ln, format!("bad value `{c}`")))?;
                    if v >= support {
                        return Err(Error::parse(ln, format!("value {v} outside support {support}")));
                    }
                    ints.push(v);
                }
            }
        }
        let values = if soft { Values::Soft(reals) } else { Values::Int(ints) };
        let mut d = Dataset::new(n_vars, support, values)?;
        if let Some(shape) = shape {
            d = d.with_image_shape(shape).map_err(|e| Error::parse(hl, e.to_string()))?;
        }
        d.split = split;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Concatenated one-hot blocks, one per variable.
pub fn encode_onehot(x: &[usize], support_size: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len() * support_size];
    for (i, &v) in x.iter().enumerate() {
        if v >= support_size {
            return Err(Error::Index(format!("value {v} outside support {support_size}")));
        }
        out[i * support_size + v] = 1.0;
    }
    Ok(out)
}

/// Block-wise argmax, ties toward the smaller value.
pub fn decode_onehot(v: &[f64], support_size: usize) -> Result<Vec<usize>> {
    if support_size == 0 || v.len() % support_size != 0 {
        return Err(Error::Shape(format!(
            "length {} is not a multiple of {support_size}",
            v.len()
        )));
    }
    Ok(v.chunks(support_size).map(argmax).collect())
}

/// Index of the largest entry, ties toward the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Prior `(1 - v, v)` over the values {0, 1}.
pub fn bernoulli_encode(v: f64) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Input(format!("{v} is not a probability")));
    }
    Ok([1.0 - v, v])
}

/// Mass on value 1 of a normalized binary row.
pub fn bernoulli_decode(row: &[f64]) -> Result<f64> {
    if row.len() != 2 {
        return Err(Error::Shape(format!("binary row of length {}", row.len())));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Input("row is not a normalized distribution".into()));
    }
    Ok(row[1])
}

/// Thresholds grayscale rows in [0, 1]: strictly above `threshold` is 1.
pub fn binarize_images(images: &[Vec<f64>], threshold: f64, shape: (usize, usize)) -> Result<Dataset> {
    let n = shape.0 * shape.1;
    let mut values = Vec::with_capacity(images.len() * n);
    for img in images {
        if img.len() != n {
            return Err(Error::Shape(format!(
                "image of {} pixels for {}x{}",
                img.len(),
                shape.0,
                shape.1
            )));
        }
        if img.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel intensities must lie in [0, 1]".into()));
        }
        values.extend(img.iter().map(|&p| usize::from(p > threshold)));
    }
    Dataset::new(n, 2, Values::Int(values))?.with_image_shape(shape)
}

/// A grayscale image with intensities scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

struct PgmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl PgmReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                if b == b'\n' {
                    self.line += 1;
                }
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.line, "unexpected end of image"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(self.line, "non-ASCII token"))
    }

    fn number(&mut self) -> Result<usize> {
        let line = self.line;
        let t = self.token()?;
        t.parse()
            .map_err(|_| Error::parse(line, format!("expected a number, found `{t}`")))
    }
}

/// Reads a plain (P2) or raw (P5) portable graymap.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut r = PgmReader { bytes, pos: 0, line: 1 };
    let raw = match r.token()? {
        "P2" => false,
        "P5" => true,
        m => return Err(Error::parse(1, format!("unsupported magic `{m}`"))),
    };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if width == 0 || height == 0 {
        return Err(Error::parse(r.line, "empty image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(r.line, format!("maxval {maxval} out of range")));
    }
    let count = width
        .checked_mul(height)
        .filter(|&c| c <= 1 << 26)
        .ok_or_else(|| Error::parse(r.line, "image too large"))?;
    let mut pixels = Vec::with_capacity(count);
    if raw {
        // Exactly one whitespace byte separates the header from the raster.
        if !r.bytes.get(r.pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(Error::parse(r.line, "missing raster separator"));
        }
        let data = &r.bytes[r.pos + 1..];
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        if data.len() < need {
            return Err(Error::parse(r.line, "raster truncated"));
        }
        for k in 0..count {
            let v = if wide {
                u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as usize
            } else {
                data[k] as usize
            };
            pixels.push(v);
        }
    } else {
        for _ in 0..count {
            pixels.push(r.number()?);
        }
    }
    if let Some(v) = pixels.iter().find(|&&v| v > maxval) {
        return Err(Error::parse(r.line, format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(GrayImage {
        height,
        width,
        pixels: pixels.into_iter().map(|v| v as f64 / maxval as f64).collect(),
    })
}

/// Writes intensities in [0, 1] as a raw 8-bit graymap.
pub fn write_pgm(mut w: impl Write, height: usize, width: usize, pixels: &[f64]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), height * width, "pixel count");
    write!(w, "P5\n{width} {height}\n255\n")?;
    let raster: Vec<u8> = pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&raster)
}

/// Tiles equally sized images into a grid with `cols` columns and a one
/// pixel gap.
pub fn tile_images(images: &[Vec<f64>], height: usize, width: usize, cols: usize) -> (usize, usize, Vec<f64>) {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols);
    let gh = rows * (height + 1) + 1;
    let gw = cols * (width + 1) + 1;
    let mut grid = vec![1.0; gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (height + 1) + 1, (k % cols) * (width + 1) + 1);
        for r in 0..height {
            for c in 0..width {
                grid[(r0 + r) * gw + c0 + c] = img[r * width + c];
            }
        }
    }
    (gh, gw, grid)
}

/// Recipes for test corpora with known generating distributions.
#[derive(Clone, Debug)]
pub enum SyntheticSpec {
    /// Independent binary variables, each 1 with probability `p`.
    IndependentBits { n_vars: usize, p: f64 },
    /// Every point equal to `values`.
    Constant { values: Vec<usize>, support_size: usize },
    /// Exact draws from a pairwise model by enumeration.
    ExactMrf {
        structure: GraphStructure,
        psi: LogPotentials,
    },
    /// One Gibbs chain per dataset.
    GibbsMrf {
        structure: GraphStructure,
        psi: LogPotentials,
        burn_in: usize,
        thinning: usize,
    },
    /// Exact draws from a weighted mixture of pairwise models over the same
    /// variables.
    Mixture {
        components: Vec<(GraphStructure, LogPotentials)>,
        weights: Vec<f64>,
    },
}

fn exact_sampler(structure: &GraphStructure, psi: &LogPotentials) -> Result<(Vec<Vec<usize>>, WeightedIndex<f64>)> {
    let joint = brute_force_joint(structure, psi, DEFAULT_STATE_CAP)?;
    let (states, probs): (Vec<_>, Vec<_>) = joint.into_iter().unzip();
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Input(e.to_string()))?;
    Ok((states, dist))
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        SyntheticSpec::IndependentBits { n_vars, p } => {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("bit probability {p}")));
            }
            let v = (0..n * n_vars).map(|_| usize::from(rng.random::<f64>() < *p)).collect();
            Dataset::new(*n_vars, 2, Values::Int(v))
        }
        SyntheticSpec::Constant { values, support_size } => {
            Dataset::new(values.len(), *support_size, Values::Int(values.repeat(n)))
        }
        SyntheticSpec::ExactMrf { structure, psi } => {
            let (states, dist) = exact_sampler(structure, psi)?;
            let v = (0..n)
                .flat_map(|_| states[dist.sample(&mut rng)].iter().copied())
                .collect();
            Dataset::new(structure.n_nodes(), structure.support_size(), Values::Int(v))
        }
        SyntheticSpec::GibbsMrf {
            structure,
            psi,
            burn_in,
            thinning,
        } => {
            let cfg = GibbsConfig {
                burn_in: *burn_in,
                thinning: *thinning,
                seed,
                init: None,
            };
            let v = gibbs::sample(structure, psi, &cfg, n)?
                .into_iter()
                .flat_map(|a| a.0)
                .collect();
            Dataset::new(structure.n_nodes(), structure.support_size(), Values::Int(v))
        }
        SyntheticSpec::Mixture { components, weights } => {
            let first = components
                .first()
                .ok_or_else(|| Error::Config("empty mixture".into()))?;
            if components.len() != weights.len() {
                return Err(Error::Config("one weight per mixture component".into()));
            }
            let (nv, s) = (first.0.n_nodes(), first.0.support_size());
            if components
                .iter()
                .any(|(g, _)| g.n_nodes() != nv || g.support_size() != s)
            {
                return Err(Error::Config("mixture components disagree on variables".into()));
            }
            let pick = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
            let samplers = components
                .iter()
                .map(|(g, psi)| exact_sampler(g, psi))
                .collect::<Result<Vec<_>>>()?;
            let v = (0..n)
                .flat_map(|_| {
                    let (states, dist) = &samplers[pick.sample(&mut rng)];
                    states[dist.sample(&mut rng)].clone()
                })
                .collect();
            Dataset::new(nv, s, Values::Int(v))
        }
    }
}
