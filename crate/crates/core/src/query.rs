//! Turning data points into conditional inference queries.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::bp::Evidence;
use crate::error::{Error, Result};

/// A partition of the nodes into evidence, query and hidden sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub evidence: Evidence,
    /// Sorted query node indices.
    pub query: Vec<usize>,
    /// Sorted hidden node indices.
    pub hidden: Vec<usize>,
    /// True value of each query node, aligned with `query`.
    pub targets: Vec<usize>,
}

impl Query {
    /// Checks that evidence, query and hidden sets partition `0..n_nodes`.
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.query.len() != self.targets.len() {
            return Err(Error::Query("every query node needs a target".into()));
        }
        if !self.evidence.soft().is_empty() {
            return Err(Error::Query("queries carry hard evidence only".into()));
        }
        let mut seen = vec![false; n_nodes];
        let all = self.evidence.hard().keys().chain(&self.query).chain(&self.hidden);
        for &i in all {
            if i >= n_nodes {
                return Err(Error::Query(format!("node {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Query(format!("node {i} appears twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Query("sets do not cover every node".into()));
        }
        Ok(())
    }

    /// Builds a query from a node mask; `true` marks query nodes, the rest
    /// are observed with their values in `x`.
    pub fn from_mask(x: &[usize], is_query: &[bool]) -> Query {
        Self::from_mask_with_targets(x, x, is_query)
    }

    fn from_mask_with_targets(observed: &[usize], truth: &[usize], is_query: &[bool]) -> Query {
        let mut evidence = Evidence::new();
        let mut query = Vec::new();
        let mut targets = Vec::new();
        for (i, &q) in is_query.iter().enumerate() {
            if q {
                query.push(i);
                targets.push(truth[i]);
            } else {
                evidence
                    .set_hard(i, observed[i])
                    .expect("fresh node is never observed twice");
            }
        }
        Query {
            evidence,
            query,
            hidden: Vec::new(),
            targets,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    Fractional(f64),
    Corrupt(f64),
    Window(usize),
    Quadrant(usize),
}

/// One query scheme with its parameter. Image schemes need `image_shape`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub image_shape: Option<(usize, usize)>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            image_shape: None,
        }
    }

    pub fn fractional(f: f64) -> Self {
        Self::new(TaskKind::Fractional(f))
    }

    pub fn corrupt(c: f64) -> Self {
        Self::new(TaskKind::Corrupt(c))
    }

    pub fn window(w: usize, shape: (usize, usize)) -> Self {
        Self::new(TaskKind::Window(w)).with_image_shape(shape)
    }

    pub fn quadrant(q: usize, shape: (usize, usize)) -> Self {
        Self::new(TaskKind::Quadrant(q)).with_image_shape(shape)
    }

    pub fn with_image_shape(mut self, shape: (usize, usize)) -> Self {
        self.image_shape = Some(shape);
        self
    }

    /// Same scheme and parameter, ignoring the bound image shape.
    pub fn same_task(&self, other: &TaskSpec) -> bool {
        self.kind == other.kind
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Fractional(p) | TaskKind::Corrupt(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Query(format!("{self}: parameter must lie in [0, 1]")));
                }
            }
            TaskKind::Window(w) => {
                let (h, wd) = self.require_shape()?;
                if w > h.min(wd) {
                    return Err(Error::Query(format!("{self}: window exceeds the {h}x{wd} image")));
                }
            }
            TaskKind::Quadrant(q) => {
                self.require_shape()?;
                if !(1..=3).contains(&q) {
                    return Err(Error::Query(format!("{self}: quadrant count must be 1, 2 or 3")));
                }
            }
        }
        Ok(())
    }

    fn require_shape(&self) -> Result<(usize, usize)> {
        self.image_shape
            .ok_or_else(|| Error::Query(format!("{self} needs an image shape")))
    }

    /// Draws a query for data point `x`.
    pub fn make_query(&self, x: &[usize], support_size: usize, rng: &mut impl Rng) -> Result<Query> {
        self.validate()?;
        if let Some((h, w)) = self.image_shape {
            if h * w != x.len() {
                return Err(Error::Shape(format!(
                    "{h}x{w} image shape does not match {} variables",
                    x.len()
                )));
            }
        }
        match self.kind {
            TaskKind::Fractional(f) => Ok(fractional(f, x, rng)),
            TaskKind::Corrupt(c) => Ok(corrupt(c, x, support_size, rng)),
            TaskKind::Window(w) => {
                let (h, wd) = self.require_shape()?;
                Ok(window(w, x, h, wd))
            }
            TaskKind::Quadrant(q) => {
                let (h, wd) = self.require_shape()?;
                Ok(quadrant(q, x, h, wd, rng))
            }
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::Fractional(p) => write!(f, "fractional={p}"),
            TaskKind::Corrupt(p) => write!(f, "corrupt={p}"),
            TaskKind::Window(w) => write!(f, "window={w}"),
            TaskKind::Quadrant(q) => write!(f, "quadrant={q}"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("task `{s}`: {msg}"));
        let (key, value) = s.trim().split_once('=').ok_or_else(|| bad("expected name=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let real = || -> Result<f64> {
            let v: f64 = value.parse().map_err(|_| bad("parameter is not a number"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad("parameter must lie in [0, 1]"));
            }
            Ok(v)
        };
        let int = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| bad("parameter is not a non-negative integer"))
        };
        let kind = match key {
            "fractional" => TaskKind::Fractional(real()?),
            "corrupt" => TaskKind::Corrupt(real()?),
            "window" => TaskKind::Window(int()?),
            "quadrant" => {
                let q = int()?;
                if !(1..=3).contains(&q) {
                    return Err(bad("quadrant count must be 1, 2 or 3"));
                }
                TaskKind::Quadrant(q)
            }
            _ => return Err(bad("unknown scheme")),
        };
        Ok(TaskSpec::new(kind))
    }
}

/// The parsed form of a comma-separated task list such as
/// `fractional=0.7,corrupt=0.5,exclude=window=7`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskList {
    pub specs: Vec<TaskSpec>,
    pub exclude: Option<TaskSpec>,
}

impl TaskList {
    pub fn with_image_shape(mut self, shape: Option<(usize, usize)>) -> Self {
        if let Some(shape) = shape {
            for s in &mut self.specs {
                s.image_shape = Some(shape);
            }
            if let Some(e) = &mut self.exclude {
                e.image_shape = Some(shape);
            }
        }
        self
    }
}

impl fmt::Display for TaskList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.specs.iter().map(|s| s.to_string()).collect();
        if let Some(e) = &self.exclude {
            parts.push(format!("exclude={e}"));
        }
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TaskList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut specs = Vec::new();
        let mut exclude = None;
        for item in s.split(',') {
            let item = item.trim();
            if let Some(rest) = item.strip_prefix("exclude=") {
                if exclude.replace(rest.parse()?).is_some() {
                    return Err(Error::Config(format!("task list `{s}`: more than one exclude clause")));
                }
            } else {
                specs.push(item.parse()?);
            }
        }
        if specs.is_empty() {
            return Err(Error::Config(format!("task list `{s}` names no task")));
        }
        Ok(TaskList { specs, exclude })
    }
}

/// A uniform mixture over task specs, optionally with one held out.
#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    specs: Vec<TaskSpec>,
}

impl Curriculum {
    pub fn new(specs: &[TaskSpec], exclude: Option<&TaskSpec>) -> Result<Self> {
        let specs: Vec<TaskSpec> = specs
            .iter()
            .filter(|s| exclude.is_none_or(|e| !s.same_task(e)))
            .copied()
            .collect();
        if specs.is_empty() {
            return Err(Error::Query("no task left after exclusion".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(Curriculum { specs })
    }

    pub fn from_list(list: &TaskList) -> Result<Self> {
        Self::new(&list.specs, list.exclude.as_ref())
    }

    pub fn single(spec: TaskSpec) -> Result<Self> {
        Self::new(&[spec], None)
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn draw(&self, rng: &mut impl Rng) -> &TaskSpec {
        &self.specs[rng.random_range(0..self.specs.len())]
    }

    /// Draws a task, then a query of that task for `x`.
    pub fn make_query(&self, x: &[usize], support_size: usize, rng: &mut impl Rng) -> Result<Query> {
        let spec = *self.draw(rng);
        spec.make_query(x, support_size, rng)
    }
}

/// Number of query nodes for fraction `f` of `n`, rounding half away from zero.
pub fn fractional_count(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).min(n)
}

pub fn fractional(f: f64, x: &[usize], rng: &mut impl Rng) -> Query {
    let n = x.len();
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, fractional_count(f, n)) {
        mask[i] = true;
    }
    Query::from_mask(x, &mask)
}

/// Replaces each value, with probability `c`, by a uniformly chosen different
/// value.
pub fn corrupt_point(c: f64, x: &[usize], support_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    x.iter()
        .map(|&v| {
            if support_size > 1 && rng.random::<f64>() < c {
                let r = rng.random_range(0..support_size - 1);
                if r >= v {
                    r + 1
                } else {
                    r
                }
            } else {
                v
            }
        })
        .collect()
}

/// Corrupts `x`, then hides half of the variables. Evidence carries the
/// corrupted values; targets are the original ones.
pub fn corrupt(c: f64, x: &[usize], support_size: usize, rng: &mut impl Rng) -> Query {
    let noisy = corrupt_point(c, x, support_size, rng);
    let n = x.len();
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, fractional_count(0.5, n)) {
        mask[i] = true;
    }
    Query::from_mask_with_targets(&noisy, x, &mask)
}

/// Hides the centered `w x w` square of an `h x width` image.
pub fn window(w: usize, x: &[usize], h: usize, width: usize) -> Query {
    let (r0, c0) = ((h - w) / 2, (width - w) / 2);
    let mut mask = vec![false; h * width];
    for r in r0..r0 + w {
        for c in c0..c0 + w {
            mask[r * width + c] = true;
        }
    }
    Query::from_mask(x, &mask)
}

/// Row and column ranges of quadrant `k` (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right).
pub fn quadrant_bounds(k: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (hm, wm) = (h / 2, w / 2);
    let rows = if k < 2 { 0..hm } else { hm..h };
    let cols = if k % 2 == 0 { 0..wm } else { wm..w };
    (rows, cols)
}

/// Hides `q` distinct quadrants chosen uniformly.
pub fn quadrant(q: usize, x: &[usize], h: usize, w: usize, rng: &mut impl Rng) -> Query {
    let mut mask = vec![false; h * w];
    for k in index::sample(rng, 4, q) {
        let (rows, cols) = quadrant_bounds(k, h, w);
        for r in rows {
            for c in cols.clone() {
                mask[r * w + c] = true;
            }
        }
    }
    Query::from_mask(x, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fractional_counts() {
        let x = vec![1; 784];
        assert_eq!(fractional(0.5, &x, &mut rng(0)).query.len(), 392);
        let all = fractional(1.0, &x[..10], &mut rng(0));
        assert_eq!(all.query.len(), 10);
        assert!(all.evidence.is_empty());
        let none = fractional(0.0, &x[..10], &mut rng(0));
        assert!(none.query.is_empty());
        assert_eq!(none.evidence.hard().len(), 10);
        assert_eq!(fractional_count(0.5, 5), 3);
        assert_eq!(fractional_count(0.7, 16), 11);
    }

    #[test]
    fn corrupt_full_flip_binary() {
        let x: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let q = corrupt(1.0, &x, 2, &mut rng(1));
        for (&i, &v) in q.evidence.hard() {
            assert_eq!(v, 1 - x[i]);
        }
        for (&i, &t) in q.query.iter().zip(&q.targets) {
            assert_eq!(t, x[i]);
        }
        assert_eq!(q.query.len(), 25);
    }

    #[test]
    fn corrupt_rate_concentrates() {
        let x = vec![0usize; 10_000];
        let noisy = corrupt_point(0.5, &x, 2, &mut rng(2));
        let frac = noisy.iter().filter(|&&v| v != 0).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 0.02);
        let noisy = corrupt_point(1.0, &[0, 1, 2, 1], 3, &mut rng(3));
        assert!(noisy.iter().zip([0, 1, 2, 1]).all(|(a, b)| *a != b && *a < 3));
    }

    #[test]
    fn window_offsets() {
        let x = vec![0; 784];
        let q = window(7, &x, 28, 28);
        assert_eq!(q.query.len(), 49);
        for &i in &q.query {
            let (r, c) = (i / 28, i % 28);
            assert!((10..=16).contains(&r) && (10..=16).contains(&c));
        }
        assert_eq!(window(28, &x, 28, 28).query.len(), 784);
        assert!(window(0, &x, 28, 28).query.is_empty());
        assert!(TaskSpec::window(29, (28, 28)).make_query(&x, 2, &mut rng(0)).is_err());
    }

    #[test]
    fn quadrant_counts_and_frequencies() {
        let x = vec![0; 784];
        assert_eq!(quadrant(1, &x, 28, 28, &mut rng(4)).query.len(), 196);
        let q3 = quadrant(3, &x, 28, 28, &mut rng(4));
        assert_eq!((q3.query.len(), q3.evidence.hard().len()), (588, 196));
        let mut hits = [0usize; 4];
        let mut r = rng(5);
        for _ in 0..10_000 {
            let k = index::sample(&mut r, 4, 1).index(0);
            hits[k] += 1;
        }
        for h in hits {
            assert!((h as f64 / 1e4 - 0.25).abs() < 0.02);
        }
        // Odd sizes put the extra row and column in the bottom/right quadrants.
        assert_eq!(quadrant_bounds(0, 5, 7), (0..2, 0..3));
        assert_eq!(quadrant_bounds(3, 5, 7), (2..5, 3..7));
        assert!(TaskSpec::quadrant(4, (4, 4)).validate().is_err());
    }

    #[test]
    fn parse_and_display() {
        let list: TaskList = "fractional=0.7, corrupt=0.5,exclude=window=7".parse().unwrap();
        assert_eq!(list.specs, vec![TaskSpec::fractional(0.7), TaskSpec::corrupt(0.5)]);
        assert_eq!(list.exclude, Some(TaskSpec::new(TaskKind::Window(7))));
        assert_eq!(list.to_string(), "fractional=0.7,corrupt=0.5,exclude=window=7");
        for bad in [
            "",
            "fractional",
            "fractional=1.5",
            "window=-1",
            "quadrant=0",
            "blur=3",
            "exclude=corrupt=0.1",
        ] {
            assert!(bad.parse::<TaskList>().is_err(), "{bad}");
        }
    }

    #[test]
    fn curriculum_mixes_and_excludes() {
        let shape = (4, 4);
        let specs = [
            TaskSpec::fractional(0.5).with_image_shape(shape),
            TaskSpec::corrupt(0.5).with_image_shape(shape),
            TaskSpec::window(2, shape),
            TaskSpec::quadrant(1, shape),
        ];
        let mix = Curriculum::new(&specs, None).unwrap();
        let mut counts = [0usize; 4];
        let mut r = rng(6);
        for _ in 0..10_000 {
            let s = mix.draw(&mut r);
            counts[specs.iter().position(|t| t == s).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() < 0.02);
        }
        let mix1 = Curriculum::new(&specs, Some(&TaskSpec::corrupt(0.5))).unwrap();
        for _ in 0..1000 {
            assert!(!matches!(mix1.draw(&mut r).kind, TaskKind::Corrupt(_)));
        }
        let one = Curriculum::single(TaskSpec::fractional(0.3)).unwrap();
        assert_eq!(*one.draw(&mut r), TaskSpec::fractional(0.3));
        assert!(Curriculum::new(&specs[..1], Some(&specs[0])).is_err());
    }

    #[test]
    fn validate_catches_overlap() {
        let mut q = fractional(0.5, &[0, 1, 0, 1], &mut rng(7));
        q.validate(4).unwrap();
        q.hidden.push(q.query[0]);
        assert!(q.validate(4).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn every_scheme_partitions(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, k in 0usize..4, p in 0.0f64..=1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
                let spec = match k {
                    0 => TaskSpec::fractional(p),
                    1 => TaskSpec::corrupt(p),
                    2 => TaskSpec::window(rng.random_range(0..=h.min(w)), (h, w)),
                    _ => TaskSpec::quadrant(rng.random_range(1..=3), (h, w)),
                };
                let q = spec.make_query(&x, 3, &mut rng).unwrap();
                q.validate(h * w).unwrap();
                for (&i, &t) in q.query.iter().zip(&q.targets) {
                    prop_assert_eq!(t, x[i]);
                }
                let mut a = ChaCha8Rng::seed_from_u64(seed ^ 1);
                let mut b = ChaCha8Rng::seed_from_u64(seed ^ 1);
                prop_assert_eq!(spec.make_query(&x, 3, &mut a).unwrap(), spec.make_query(&x, 3, &mut b).unwrap());
            }
        }
    }
}
