//! Binary checkpoints of a training run.
//!
//! Layout: magic `TPCK`, u32 version, u64 header length, a JSON header
//! (config, counters, rng states, tensor directory, cache index), then every
//! tensor and cache entry as little-endian f64 in directory order. Resuming
//! from a checkpoint continues the run bit for bit.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::discriminator::Discriminator;
use crate::encoder::Predictor;
use crate::error::{Error, Result};
use crate::kinematics::KinematicModel;
use crate::loader::{LoaderState, PredictionCache};
use crate::optim::{Adam, Plateau};
use crate::param_vector::{ParamVector, PARAM_DIM};
use crate::params::Parameters;
use crate::train::TrainerState;

const MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl AdamMeta {
    fn of(a: &Adam) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    iteration: u64,
    mean: ParamVector,
    tensors: Vec<TensorEntry>,
    adam_predictor: AdamMeta,
    adam_discriminator: AdamMeta,
    loader_rng: ChaCha8Rng,
    rng: ChaCha8Rng,
    plateau: Plateau,
    active_3d: Vec<usize>,
    active_2d: Vec<usize>,
    /// `(video, frame, stamp)`; parameters follow the tensors in the payload.
    cache: Vec<(usize, usize, u64)>,
}

/// Collects `(name, tensor)` pairs in payload order.
fn directory<'a>(state: &'a TrainerState) -> Vec<(String, &'a DMatrix<f64>)> {
    let mut out = Vec::new();
    let mut add = |prefix: &str, ts: Vec<(String, &'a DMatrix<f64>)>| {
        out.extend(ts.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    };
    let pnames = state.predictor.params.tensors();
    let dnames = state.discriminator.params.tensors();
    add("predictor", state.predictor.params.tensors());
    add("discriminator", state.discriminator.params.tensors());
    for (tag, opt, names) in [
        ("adam_predictor", &state.opt_predictor, &pnames),
        ("adam_discriminator", &state.opt_discriminator, &dnames),
    ] {
        add(
            &format!("{tag}.m"),
            names.iter().map(|(n, _)| n.clone()).zip(opt.m.iter()).collect(),
        );
        add(
            &format!("{tag}.v"),
            names.iter().map(|(n, _)| n.clone()).zip(opt.v.iter()).collect(),
        );
    }
    out
}

pub fn to_bytes(config: &RunConfig, state: &TrainerState) -> Result<Vec<u8>> {
    let dir = directory(state);
    let entries = state.cache.entries();
    let header = Header {
        config: config.clone(),
        iteration: state.loader.iteration,
        mean: state.predictor.mean.clone(),
        tensors: dir
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
        adam_predictor: AdamMeta::of(&state.opt_predictor),
        adam_discriminator: AdamMeta::of(&state.opt_discriminator),
        loader_rng: state.loader.rng.clone(),
        rng: state.rng.clone(),
        plateau: state.plateau.clone(),
        active_3d: state.active_3d.clone(),
        active_2d: state.active_2d.clone(),
        cache: entries.iter().map(|e| (e.0, e.1, e.2)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &dir {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for e in &entries {
        for v in e.3.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader over the checkpoint bytes.
struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Copies payload tensors into `dst`, checking names and shapes against
/// the header directory.
fn fill<P: Parameters>(
    dst: &mut P,
    prefix: &str,
    names: &[(String, (usize, usize))],
    dir: &mut std::slice::Iter<TensorEntry>,
    cur: &mut Cursor,
) -> Result<()> {
    let mut targets = dst.tensors_mut();
    if targets.len() != names.len() {
        return Err(Error::Checkpoint(format!("{prefix}: tensor count mismatch")));
    }
    for (t, (name, shape)) in targets.iter_mut().zip(names) {
        let e = dir
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}.{name} missing from directory")))?;
        if e.name != format!("{prefix}.{name}") || (e.rows, e.cols) != *shape {
            return Err(Error::Checkpoint(format!(
                "expected {prefix}.{name} {:?}, found {} ({}, {})",
                shape, e.name, e.rows, e.cols
            )));
        }
        t.copy_from_slice(&cur.f64s(e.rows * e.cols)?);
    }
    Ok(())
}

fn shapes<P: Parameters>(p: &P) -> Vec<(String, (usize, usize))> {
    p.tensors().into_iter().map(|(n, t)| (n, t.shape())).collect()
}

/// Wraps a list of matrices so moments can be filled like parameters.
#[derive(Clone)]
struct Moments(Vec<DMatrix<f64>>, Vec<String>);

impl Parameters for Moments {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        self.1.iter().cloned().zip(self.0.iter()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.0.iter_mut().collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, TrainerState)> {
    let mut cur = Cursor { bytes };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = cur.u64()? as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    let config = header.config.clone();
    config.validate()?;

    let body = KinematicModel::default_body();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut predictor = Predictor::new(&mut dummy, config.predictor.clone(), header.mean.clone())?;
    let mut discriminator = Discriminator::new(&mut dummy, body.skeleton(), config.discriminator.clone())?;
    let pshapes = shapes(&predictor.params);
    let dshapes = shapes(&discriminator.params);
    let mut dir = header.tensors.iter();
    fill(&mut predictor.params, "predictor", &pshapes, &mut dir, &mut cur)?;
    fill(&mut discriminator.params, "discriminator", &dshapes, &mut dir, &mut cur)?;

    let mut opts = Vec::new();
    for (tag, meta, names, params) in [
        (
            "adam_predictor",
            &header.adam_predictor,
            &pshapes,
            predictor.params.tensors(),
        ),
        (
            "adam_discriminator",
            &header.adam_discriminator,
            &dshapes,
            discriminator.params.tensors(),
        ),
    ] {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, t)| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        let labels: Vec<String> = names.iter().map(|(n, _)| n.clone()).collect();
        let mut m = Moments(zeros.clone(), labels.clone());
        let mut v = Moments(zeros, labels);
        fill(&mut m, &format!("{tag}.m"), names, &mut dir, &mut cur)?;
        fill(&mut v, &format!("{tag}.v"), names, &mut dir, &mut cur)?;
        opts.push(Adam {
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            step: meta.step,
            m: m.0,
            v: v.0,
        });
    }
    if dir.next().is_some() {
        return Err(Error::Checkpoint("unexpected tensors in directory".into()));
    }
    let mut cache = PredictionCache::new();
    for &(video, frame, stamp) in &header.cache {
        cache.write(video, frame, ParamVector::from_slice(&cur.f64s(PARAM_DIM)?)?, stamp);
    }
    if !cur.bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", cur.bytes.len())));
    }
    let mut loader = LoaderState::new(config.loader.clone(), header.loader_rng)?;
    loader.iteration = header.iteration;
    let opt_discriminator = opts.pop().expect("two optimizers");
    let opt_predictor = opts.pop().expect("two optimizers");
    Ok((
        config,
        TrainerState {
            predictor,
            discriminator,
            opt_predictor,
            opt_discriminator,
            loader,
            rng: header.rng,
            cache,
            plateau: header.plateau,
            active_3d: header.active_3d,
            active_2d: header.active_2d,
        },
    ))
}

pub fn save(path: &Path, config: &RunConfig, state: &TrainerState) -> Result<()> {
    std::fs::write(path, to_bytes(config, state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainerState)> {
    from_bytes(&std::fs::read(path)?)
}
