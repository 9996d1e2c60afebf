//! Synthetic non-stationary labeled streams with album structure and a
//! held-out timestamped validation split.
//!
//! A stream is described by a [`StreamSpec`]: an ordered list of drift
//! segments that tile the step range `[0, H)`, each carrying per-class mean
//! vectors, per-class prior weights and a noise scale. Materialization emits
//! one album per step: the album size is drawn from the spec's size
//! distribution, members share the album's base label with probability
//! `p_album`, and features are Gaussian draws around the class mean.
//! Everything is deterministic given the seed.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OclError, Result};
use crate::geocells::GeoPoint;

/// One timestamped, labeled feature vector with album and optional
/// geolocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    /// Stream step at which the example arrives; non-decreasing in serve order.
    pub timestamp: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub album_id: u64,
    pub geo: Option<GeoPoint>,
}

/// One stationary piece of the stream: steps `[start, end)` draw labels from
/// `class_priors` and features from `class_means[label] + noise * N(0, I)`.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub class_means: Vec<Vec<f64>>,
    pub class_priors: Vec<f64>,
    pub noise: f64,
}

/// Categorical distribution over album sizes.
#[derive(Debug, Clone)]
pub struct AlbumSizeDist {
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AlbumSizeDist {
    pub fn fixed(size: usize) -> Self {
        AlbumSizeDist {
            sizes: vec![size],
            weights: vec![1.0],
        }
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.sizes
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| s as f64 * w)
            .sum::<f64>()
            / total
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.len() != self.weights.len() {
            return Err(OclError::config("album size distribution is empty or ragged"));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(OclError::config("album sizes must be >= 1"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(OclError::config("album size weights must be >= 0"));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(OclError::config("album size weights must not all be zero"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&size, &w) in self.sizes.iter().zip(&self.weights) {
            if u < w {
                return size;
            }
            u -= w;
        }
        *self.sizes.last().expect("validated non-empty")
    }
}

/// Declarative description of a non-stationary ordered data sequence.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub dim: usize,
    pub num_classes: usize,
    /// Total stream steps H; each step emits one album.
    pub steps: u64,
    pub segments: Vec<Segment>,
    pub album_sizes: AlbumSizeDist,
    /// Probability that an album member shares the album's base label.
    pub p_album: f64,
    pub seed: u64,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 || self.steps == 0 {
            return Err(OclError::config("dim, num_classes and steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_album) {
            return Err(OclError::config("p_album must be in [0, 1]"));
        }
        self.album_sizes.validate()?;
        if self.segments.is_empty() {
            return Err(OclError::config("at least one segment is required"));
        }
        let mut cursor = 0u64;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start != cursor {
                return Err(OclError::config(format!(
                    "segment {i} starts at {} but {} expected (gap or overlap)",
                    seg.start, cursor
                )));
            }
            if seg.end <= seg.start {
                return Err(OclError::config(format!("segment {i} is empty")));
            }
            cursor = seg.end;
            if seg.class_means.len() != self.num_classes
                || seg.class_priors.len() != self.num_classes
            {
                return Err(OclError::config(format!(
                    "segment {i} must carry {} class means and priors",
                    self.num_classes
                )));
            }
            if seg.class_means.iter().any(|m| m.len() != self.dim) {
                return Err(OclError::config(format!(
                    "segment {i} has a mean vector of the wrong dimensionality"
                )));
            }
            if seg.class_priors.iter().any(|&p| !(p >= 0.0)) {
                return Err(OclError::config(format!("segment {i} has a negative prior")));
            }
            let sum: f64 = seg.class_priors.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(OclError::config(format!(
                    "segment {i} priors sum to {sum}, expected 1 within 1e-9"
                )));
            }
            if !(seg.noise >= 0.0) {
                return Err(OclError::config(format!("segment {i} noise must be >= 0")));
            }
        }
        if cursor != self.steps {
            return Err(OclError::config(format!(
                "segments tile [0, {cursor}) but the stream declares {} steps",
                self.steps
            )));
        }
        Ok(())
    }

    fn segment_at(&self, t: u64) -> &Segment {
        // Segments are validated to tile [0, H) in order.
        let idx = self.segments.partition_point(|s| s.end <= t);
        &self.segments[idx.min(self.segments.len() - 1)]
    }
}

/// A materialized stream: immutable, ordered examples plus header metadata.
#[derive(Debug, Clone)]
pub struct Stream {
    pub dim: usize,
    pub num_classes: usize,
    pub steps: u64,
    pub examples: Vec<Example>,
}

/// Held-out examples sampled across the full time range, disjoint by id from
/// the training stream.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub examples: Vec<Example>,
    pub fraction: f64,
}

fn sample_categorical(priors: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &p) in priors.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    priors.len() - 1
}

fn draw_features(mean: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let g: f64 = StandardNormal.sample(rng);
            m + noise * g
        })
        .collect()
}

/// Materializes a spec into a concrete stream: one album per step, fully
/// deterministic given the seed.
pub fn materialize(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::new();
    let mut id = 0u64;
    for t in 0..spec.steps {
        let seg = spec.segment_at(t);
        let size = spec.album_sizes.sample(&mut rng);
        let base_label = sample_categorical(&seg.class_priors, &mut rng);
        for member in 0..size {
            let label = if member == 0 || rng.random::<f64>() < spec.p_album {
                base_label
            } else {
                sample_categorical(&seg.class_priors, &mut rng)
            };
            examples.push(Example {
                id,
                timestamp: t,
                features: draw_features(&seg.class_means[label], seg.noise, &mut rng),
                label,
                album_id: t,
                geo: None,
            });
            id += 1;
        }
    }
    Ok(Stream {
        dim: spec.dim,
        num_classes: spec.num_classes,
        steps: spec.steps,
        examples,
    })
}

/// Re-groups a flat example list into albums: run lengths come from the
/// spec's size distribution, consecutive runs share a fresh album id, and
/// each member adopts the album's base label with probability `p_album`
/// (redrawing its features from the adopted class so the generative story
/// stays consistent).
pub fn group_into_albums(
    examples: &[Example],
    spec: &StreamSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    spec.album_sizes.validate()?;
    let mut out = Vec::with_capacity(examples.len());
    let mut album_id = 0u64;
    let mut i = 0;
    while i < examples.len() {
        let size = spec.album_sizes.sample(rng).min(examples.len() - i);
        let base_label = examples[i].label;
        for member in 0..size {
            let mut ex = examples[i + member].clone();
            ex.album_id = album_id;
            if member > 0 && rng.random::<f64>() < spec.p_album && ex.label != base_label {
                ex.label = base_label;
                let seg = spec.segment_at(ex.timestamp.min(spec.steps - 1));
                ex.features = draw_features(&seg.class_means[base_label], seg.noise, rng);
            }
            out.push(ex);
        }
        album_id += 1;
        i += size;
    }
    Ok(out)
}

/// Splits a stream into training examples (original order) and a validation
/// set of `floor(fraction * N)` examples sampled uniformly over the whole
/// range.
pub fn holdout_split(stream: &Stream, fraction: f64, seed: u64) -> Result<(Stream, ValidationSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(OclError::config(format!(
            "holdout fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n = stream.examples.len();
    let n_val = ((fraction * n as f64).floor() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    for idx in rand::seq::index::sample(&mut rng, n, n_val) {
        chosen[idx] = true;
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, ex) in stream.examples.iter().enumerate() {
        if chosen[i] {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        Stream {
            dim: stream.dim,
            num_classes: stream.num_classes,
            steps: stream.steps,
            examples: train,
        },
        ValidationSet {
            examples: val,
            fraction,
        },
    ))
}

/// Read position over an immutable stream.
#[derive(Debug, Clone, Default)]
pub struct StreamCursor {
    pos: usize,
}

impl StreamCursor {
    pub fn new() -> Self {
        StreamCursor { pos: 0 }
    }

    /// Next batch of up to `b` examples in serve order; the final batch may
    /// be shorter. Exhaustion is signalled by `None`, not an error.
    pub fn next_batch<'a>(&mut self, stream: &'a Stream, b: usize) -> Option<&'a [Example]> {
        assert!(b > 0, "batch size must be positive");
        if self.pos >= stream.examples.len() {
            return None;
        }
        let end = (self.pos + b).min(stream.examples.len());
        let batch = &stream.examples[self.pos..end];
        self.pos = end;
        Some(batch)
    }

    /// Timestamp of the next unserved example, if any.
    pub fn peek_timestamp(&self, stream: &Stream) -> Option<u64> {
        stream.examples.get(self.pos).map(|e| e.timestamp)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Leading run of a batch sharing the first example's album id.
pub fn first_album(batch: &[Example]) -> &[Example] {
    if batch.is_empty() {
        return batch;
    }
    let album = batch[0].album_id;
    let len = batch.iter().take_while(|e| e.album_id == album).count();
    &batch[..len]
}

impl Stream {
    /// Serializes to the columnar text format:
    /// a magic line, a header line, then one CSV row per example
    /// (`id,timestamp,album_id,label,f0..fD-1[,lat,lon]`) with floats at 17
    /// significant digits for exact round-trips.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "oclstream 1")?;
        writeln!(
            w,
            "dim={} classes={} steps={}",
            self.dim, self.num_classes, self.steps
        )?;
        for ex in &self.examples {
            write_example_row(&mut w, ex)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let magic = lines
            .next()
            .transpose()?
            .ok_or_else(|| OclError::integrity("empty stream file"))?;
        if magic.trim() != "oclstream 1" {
            return Err(OclError::integrity("bad stream magic"));
        }
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| OclError::integrity("stream file missing header"))?;
        let (dim, num_classes, steps, _) = parse_stream_header(&header)?;
        let mut examples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_example_row(&line, dim, num_classes)?);
        }
        Ok(Stream {
            dim,
            num_classes,
            steps,
            examples,
        })
    }
}

impl ValidationSet {
    /// Same row format as a stream, with the fraction recorded in the header.
    pub fn write_to(&self, mut w: impl Write, dim: usize, num_classes: usize, steps: u64) -> Result<()> {
        writeln!(w, "oclvalidation 1")?;
        writeln!(
            w,
            "dim={dim} classes={num_classes} steps={steps} fraction={:.16e}",
            self.fraction
        )?;
        for ex in &self.examples {
            write_example_row(&mut w, ex)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<(Self, usize, usize, u64)> {
        let mut lines = r.lines();
        let magic = lines
            .next()
            .transpose()?
            .ok_or_else(|| OclError::integrity("empty validation file"))?;
        if magic.trim() != "oclvalidation 1" {
            return Err(OclError::integrity("bad validation magic"));
        }
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| OclError::integrity("validation file missing header"))?;
        let (dim, num_classes, steps, fraction) = parse_stream_header(&header)?;
        let mut examples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_example_row(&line, dim, num_classes)?);
        }
        Ok((
            ValidationSet {
                examples,
                fraction: fraction.unwrap_or(0.0),
            },
            dim,
            num_classes,
            steps,
        ))
    }
}

fn write_example_row(w: &mut impl Write, ex: &Example) -> Result<()> {
    write!(w, "{},{},{},{}", ex.id, ex.timestamp, ex.album_id, ex.label)?;
    for f in &ex.features {
        write!(w, ",{f:.16e}")?;
    }
    if let Some(geo) = ex.geo {
        write!(w, ",{:.16e},{:.16e}", geo.lat, geo.lon)?;
    }
    writeln!(w)?;
    Ok(())
}

fn parse_stream_header(header: &str) -> Result<(usize, usize, u64, Option<f64>)> {
    let (mut dim, mut classes, mut steps, mut fraction) = (None, None, None, None);
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| OclError::integrity(format!("bad header field '{field}'")))?;
        match key {
            "dim" => dim = Some(value.parse().map_err(|_| OclError::integrity("bad dim"))?),
            "classes" => {
                classes = Some(value.parse().map_err(|_| OclError::integrity("bad classes"))?)
            }
            "steps" => steps = Some(value.parse().map_err(|_| OclError::integrity("bad steps"))?),
            "fraction" => {
                fraction = Some(value.parse().map_err(|_| OclError::integrity("bad fraction"))?)
            }
            _ => return Err(OclError::integrity(format!("unknown header key '{key}'"))),
        }
    }
    Ok((
        dim.ok_or_else(|| OclError::integrity("header missing dim"))?,
        classes.ok_or_else(|| OclError::integrity("header missing classes"))?,
        steps.ok_or_else(|| OclError::integrity("header missing steps"))?,
        fraction,
    ))
}

fn parse_example_row(line: &str, dim: usize, num_classes: usize) -> Result<Example> {
    let fields: Vec<&str> = line.split(',').collect();
    let with_geo = fields.len() == dim + 6;
    if fields.len() != dim + 4 && !with_geo {
        return Err(OclError::integrity(format!(
            "row has {} fields, expected {} or {}",
            fields.len(),
            dim + 4,
            dim + 6
        )));
    }
    let parse_u64 = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| OclError::integrity(format!("bad {what} '{s}'")))
    };
    let parse_f64 = |s: &str, what: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| OclError::integrity(format!("bad {what} '{s}'")))
    };
    let label: usize = fields[3]
        .parse()
        .map_err(|_| OclError::integrity(format!("bad label '{}'", fields[3])))?;
    if label >= num_classes {
        return Err(OclError::integrity(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut features = Vec::with_capacity(dim);
    for s in &fields[4..4 + dim] {
        features.push(parse_f64(s, "feature")?);
    }
    let geo = if with_geo {
        Some(GeoPoint::new(
            parse_f64(fields[dim + 4], "latitude")?,
            parse_f64(fields[dim + 5], "longitude")?,
        )?)
    } else {
        None
    };
    Ok(Example {
        id: parse_u64(fields[0], "id")?,
        timestamp: parse_u64(fields[1], "timestamp")?,
        album_id: parse_u64(fields[2], "album_id")?,
        label,
        features,
        geo,
    })
}

/// Convenience builders for the stream families used across experiments.
pub mod builders {
    use super::*;

    /// Unit basis mean for class `c` shifted by `offset`, scaled by `scale`.
    pub fn axis_means(dim: usize, num_classes: usize, scale: f64, offset: usize) -> Vec<Vec<f64>> {
        (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[(c + offset) % dim] = scale;
                m
            })
            .collect()
    }

    /// Uniform priors over `num_classes`.
    pub fn uniform_priors(num_classes: usize) -> Vec<f64> {
        vec![1.0 / num_classes as f64; num_classes]
    }

    /// Class means placed on a circle in the first two feature dimensions,
    /// rotated by `angle` radians.
    pub fn rotated_circle_means(
        dim: usize,
        num_classes: usize,
        scale: f64,
        angle: f64,
    ) -> Vec<Vec<f64>> {
        (0..num_classes)
            .map(|c| {
                let theta = angle + 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = scale * theta.cos();
                m[1] = scale * theta.sin();
                m
            })
            .collect()
    }

    /// A stationary single-segment spec.
    pub fn stationary_spec(
        dim: usize,
        num_classes: usize,
        steps: u64,
        noise: f64,
        seed: u64,
    ) -> StreamSpec {
        StreamSpec {
            dim,
            num_classes,
            steps,
            segments: vec![Segment {
                start: 0,
                end: steps,
                class_means: axis_means(dim, num_classes, 3.0, 0),
                class_priors: uniform_priors(num_classes),
                noise,
            }],
            album_sizes: AlbumSizeDist::fixed(1),
            p_album: 0.9,
            seed,
        }
    }

    /// A drifting spec: class means rotate around a circle in feature space,
    /// sampled piecewise-constant over `num_segments` equal segments, sweeping
    /// `total_angle` radians in total.
    pub fn drifting_spec(
        dim: usize,
        num_classes: usize,
        steps: u64,
        num_segments: usize,
        total_angle: f64,
        noise: f64,
        seed: u64,
    ) -> StreamSpec {
        assert!(dim >= 2, "rotating drift needs at least two feature dims");
        assert!(num_segments >= 1 && steps >= num_segments as u64);
        let seg_len = steps / num_segments as u64;
        let mut segments = Vec::with_capacity(num_segments);
        for s in 0..num_segments {
            let start = s as u64 * seg_len;
            let end = if s + 1 == num_segments {
                steps
            } else {
                start + seg_len
            };
            let angle = total_angle * s as f64 / num_segments as f64;
            segments.push(Segment {
                start,
                end,
                class_means: rotated_circle_means(dim, num_classes, 3.0, angle),
                class_priors: uniform_priors(num_classes),
                noise,
            });
        }
        StreamSpec {
            dim,
            num_classes,
            steps,
            segments,
            album_sizes: AlbumSizeDist {
                sizes: vec![1, 2, 3],
                weights: vec![0.9, 0.043, 0.057],
            },
            p_album: 0.9,
            seed,
        }
    }

    /// Three equal segments whose class means permute disjoint coordinate
    /// axes, so each phase is equally learnable but mutually disjoint.
    pub fn three_phase_spec(
        dim: usize,
        num_classes: usize,
        steps: u64,
        noise: f64,
        seed: u64,
    ) -> StreamSpec {
        assert!(
            dim >= 3 * num_classes,
            "disjoint phases need dim >= 3 * num_classes"
        );
        let third = steps / 3;
        let segments = (0..3)
            .map(|s| Segment {
                start: s as u64 * third,
                end: if s == 2 { steps } else { (s as u64 + 1) * third },
                class_means: axis_means(dim, num_classes, 3.0, s * num_classes),
                class_priors: uniform_priors(num_classes),
                noise,
            })
            .collect();
        StreamSpec {
            dim,
            num_classes,
            steps,
            segments,
            album_sizes: AlbumSizeDist::fixed(1),
            p_album: 1.0,
            seed,
        }
    }
}
