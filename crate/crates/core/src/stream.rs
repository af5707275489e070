//! Driver for streaming compression runs: ingest batch files in order,
//! update a persisted representation and record per-batch statistics.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bht::{bht_l2r_with, decode, Budget, HtRepresentation, LatentBatch};
use crate::error::{HtError, Result};
use crate::io::{
    read_batch, read_representation, write_atomic, write_batch, write_representation,
    UnitRecord,
};
use crate::metrics::{
    compression_ratio, denormalize, normalize, reduction_ratio, relative_test_error, NormMethod,
};
use crate::rise::ht_rise_update_with;
use crate::tensor::{concat, permute_axes, slice_mode, DenseTensor};
use crate::tree::DimensionTree;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epsilon_rel: f64,
    pub normalize: NormMethod,
    /// Mode (of the tensor after permute and reshape) normalized field by field.
    pub field_axis: Option<usize>,
    /// Batch files or directories; directories contribute their files in
    /// lexicographic order.
    pub inputs: Vec<PathBuf>,
    /// New extents for the tensor modes; the batch axis is kept.
    pub reshape: Option<Vec<usize>>,
    /// Axis permutation applied to each file before anything else; the batch
    /// axis must end up last.
    pub permute: Option<Vec<usize>>,
    pub test_dir: Option<PathBuf>,
    pub state: PathBuf,
    pub stats: PathBuf,
    pub budget: Budget,
    /// Evaluate the test error every `rte_every` batches (0 disables it).
    pub rte_every: usize,
    /// Leave `update_seconds` blank so reruns produce identical CSV bytes.
    pub omit_timing: bool,
    /// Stop after this many new batches.
    pub max_batches: Option<usize>,
}

impl RunConfig {
    pub fn new(inputs: Vec<PathBuf>, state: PathBuf, stats: PathBuf, epsilon_rel: f64) -> Self {
        Self {
            epsilon_rel,
            normalize: NormMethod::None,
            field_axis: None,
            inputs,
            reshape: None,
            permute: None,
            test_dir: None,
            state,
            stats,
            budget: Budget::Uniform,
            rte_every: 10,
            omit_timing: false,
            max_batches: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel > 0.0 && self.epsilon_rel < 1.0) {
            return Err(HtError::InvalidArgument(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon_rel
            )));
        }
        if self.inputs.is_empty() {
            return Err(HtError::InvalidArgument("no input batches given".into()));
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamStats {
    /// One-based position in the stream.
    pub batch_index: usize,
    pub n_tensors: usize,
    pub skipped: bool,
    pub proj_error: f64,
    pub eps_des: f64,
    pub max_rank: usize,
    pub total_params: usize,
    pub cr: f64,
    pub rr: f64,
    pub update_seconds: Option<f64>,
    pub rte: Option<f64>,
}

pub const CSV_HEADER: &str =
    "batch_index,n_tensors,skipped,proj_error,eps_des,max_rank,total_params,CR,RR,update_seconds,RTE";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StreamStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.batch_index,
            self.n_tensors,
            self.skipped,
            self.proj_error,
            self.eps_des,
            self.max_rank,
            self.total_params,
            self.cr,
            self.rr,
            opt(self.update_seconds),
            opt(self.rte)
        )
    }
}

/// Expands directories into their files, sorted by name.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Applies the permutation and reshape of a run to a batch read from disk.
pub fn prepare(
    t: DenseTensor,
    permute: Option<&[usize]>,
    reshape: Option<&[usize]>,
) -> Result<DenseTensor> {
    let t = match permute {
        Some(p) => permute_axes(&t, p)?,
        None => t,
    };
    if t.order() < 3 {
        return Err(HtError::ShapeMismatch(format!(
            "batch files need at least two tensor modes plus the batch axis, got {:?}",
            t.shape()
        )));
    }
    match reshape {
        Some(target) => {
            let batch = *t.shape().last().expect("order checked");
            let mut shape = target.to_vec();
            shape.push(batch);
            if shape.len() < 3 {
                return Err(HtError::InvalidArgument(
                    "reshape target needs at least two extents".into(),
                ));
            }
            t.into_shape(shape)
        }
        None => Ok(t),
    }
}

fn source_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Exclusive lock on a state file, released on drop.
struct StateLock(PathBuf);

impl StateLock {
    fn acquire(state: &Path) -> Result<Self> {
        let mut name = state.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HtError::InvalidArgument(
                format!("{} is locked by another run", state.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_tests(config: &RunConfig) -> Result<Vec<DenseTensor>> {
    let Some(dir) = &config.test_dir else {
        return Ok(Vec::new());
    };
    let mut tests = Vec::new();
    for path in expand_inputs(std::slice::from_ref(dir))? {
        let t = prepare(
            read_batch(&path)?,
            config.permute.as_deref(),
            config.reshape.as_deref(),
        )?;
        let (t, _) = normalize(&t, config.normalize, config.field_axis)?;
        let last = t.order() - 1;
        for m in 0..t.shape()[last] {
            let s = slice_mode(&t, last, m, m + 1)?;
            let shape = t.shape()[..last].to_vec();
            tests.push(s.into_shape(shape)?);
        }
    }
    Ok(tests)
}

/// Keeps the CSV header and the first `rows` data rows.
fn trim_stats(path: &Path, rows: usize) -> Result<()> {
    let kept: Vec<String> = if path.exists() {
        fs::read_to_string(path)?
            .lines()
            .skip(1)
            .take(rows)
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for line in kept {
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn stats_for(
    h: &HtRepresentation,
    batch_index: usize,
    n_tensors: usize,
    skipped: bool,
    proj_error: f64,
    eps_des: f64,
) -> StreamStats {
    StreamStats {
        batch_index,
        n_tensors,
        skipped,
        proj_error,
        eps_des,
        max_rank: h.ranks().max(),
        total_params: h.parameter_count(),
        cr: compression_ratio(h),
        rr: reduction_ratio(h),
        update_seconds: None,
        rte: None,
    }
}

/// Runs (or resumes) a compression stream. Returns the rows written by this
/// invocation.
pub fn compress(config: &RunConfig) -> Result<Vec<StreamStats>> {
    config.validate()?;
    let inputs = expand_inputs(&config.inputs)?;
    let _lock = StateLock::acquire(&config.state)?;

    let (mut state, mut ledger) = if config.state.exists() {
        let s = read_representation(&config.state)?;
        (Some(s.representation), s.ledger)
    } else {
        (None, Vec::new())
    };
    if ledger.len() > inputs.len() {
        return Err(HtError::InvalidArgument(format!(
            "state already holds {} batches but only {} inputs were given",
            ledger.len(),
            inputs.len()
        )));
    }
    for (unit, path) in ledger.iter().zip(&inputs) {
        if unit.source != source_name(path) {
            return Err(HtError::InvalidArgument(format!(
                "resumed stream differs: state has {} where input lists {}",
                unit.source,
                path.display()
            )));
        }
    }
    trim_stats(&config.stats, ledger.len())?;
    let tests = load_tests(config)?;

    let mut rows = Vec::new();
    let pending = inputs.iter().enumerate().skip(ledger.len());
    let limit = config.max_batches.unwrap_or(usize::MAX);
    for (k, path) in pending.take(limit) {
        let raw = read_batch(path)?;
        let y = prepare(raw, config.permute.as_deref(), config.reshape.as_deref())?;
        let (y, params) = normalize(&y, config.normalize, config.field_axis)?;
        let n_tensors = *y.shape().last().expect("batch axis");

        let (h, mut row, seconds) = match &state {
            None => {
                let start = Instant::now();
                let tree = DimensionTree::balanced(y.order() - 1)?;
                let (h, _) = bht_l2r_with(&y, &tree, config.epsilon_rel, config.budget)?;
                let seconds = start.elapsed().as_secs_f64();
                let proj_error = (y.norm_sq() - h.root().norm_sq()).max(0.0).sqrt();
                let eps_des = config.epsilon_rel * y.frobenius_norm();
                let row = stats_for(&h, k + 1, n_tensors, false, proj_error, eps_des);
                (h, row, seconds)
            }
            Some(prev) => {
                if y.shape()[..y.order() - 1] != *prev.extents() {
                    return Err(HtError::ShapeMismatch(format!(
                        "{}: extents {:?} differ from the stream's {:?}",
                        path.display(),
                        &y.shape()[..y.order() - 1],
                        prev.extents()
                    )));
                }
                let (h, report) = ht_rise_update_with(prev, &y, config.epsilon_rel, config.budget)?;
                let row = stats_for(
                    &h,
                    k + 1,
                    n_tensors,
                    report.skipped,
                    report.proj_error,
                    report.eps_des,
                );
                (h, row, report.seconds)
            }
        };
        h.validate(crate::bht::ORTHO_TOL)?;
        if !config.omit_timing {
            row.update_seconds = Some(seconds);
        }
        if !tests.is_empty() && config.rte_every > 0 && (k + 1) % config.rte_every == 0 {
            row.rte = Some(relative_test_error(&h, &tests)?);
        }

        ledger.push(UnitRecord {
            source: source_name(path),
            first: h.accumulated() - n_tensors,
            count: n_tensors,
            params,
        });
        write_representation(&h, &ledger, &config.state)?;
        let mut csv = OpenOptions::new().append(true).open(&config.stats)?;
        writeln!(csv, "{}", row.csv_row())?;
        rows.push(row);
        state = Some(h);
    }
    Ok(rows)
}

/// Reconstructs accumulated tensors by one-based index, denormalized with the
/// parameters of the batch each came from, and writes them as one batch
/// file. An empty index list writes nothing and returns 0.
pub fn decode_indices(state: &Path, indices: &[usize], out: &Path) -> Result<usize> {
    if indices.is_empty() {
        return Ok(0);
    }
    let stored = read_representation(state)?;
    let h = &stored.representation;
    let mut result: Option<DenseTensor> = None;
    for &index in indices {
        if index == 0 || index > h.accumulated() {
            return Err(HtError::IndexOutOfRange {
                index,
                len: h.accumulated(),
            });
        }
        let m = index - 1;
        let mut t = decode(h, &h.latents(m, m + 1)?)?;
        if let Some(unit) = stored
            .ledger
            .iter()
            .find(|u| m >= u.first && m < u.first + u.count)
        {
            t = denormalize(&t, &unit.params)?;
        }
        let last = t.order() - 1;
        result = Some(match result {
            None => t,
            Some(acc) => concat(&acc, &t, last)?,
        });
    }
    write_batch(&result.expect("non-empty"), out)?;
    Ok(indices.len())
}

/// Decodes a latent batch file (`r_left x r_right x N`) without denormalizing.
pub fn decode_latent_file(state: &Path, latent: &Path, out: &Path) -> Result<usize> {
    let stored = read_representation(state)?;
    let latent = LatentBatch::new(read_batch(latent)?)?;
    let t = decode(&stored.representation, &latent)?;
    write_batch(&t, out)?;
    Ok(latent.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub layer: usize,
    pub position: usize,
    pub kind: String,
    /// Zero-based dimensions covered by the node.
    pub dims: Vec<usize>,
    pub rank: Option<usize>,
    pub core_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub order: usize,
    pub extents: Vec<usize>,
    pub depth: usize,
    pub node_count: usize,
    pub accumulated: usize,
    pub epsilon_rel: f64,
    pub total_params: usize,
    pub compression_ratio: f64,
    pub reduction_ratio: f64,
    pub batches: usize,
    pub nodes: Vec<NodeReport>,
}

pub fn inspect_state(state: &Path) -> Result<Inspection> {
    let stored = read_representation(state)?;
    Ok(inspect(&stored.representation, stored.ledger.len()))
}

pub fn inspect(h: &HtRepresentation, batches: usize) -> Inspection {
    let tree = h.tree();
    let nodes = tree
        .nodes()
        .map(|n| {
            let (a, b) = tree.span(n.id);
            NodeReport {
                layer: n.id.layer,
                position: n.id.position,
                kind: format!("{:?}", n.kind).to_lowercase(),
                dims: (a..b).collect(),
                rank: n.parent.map(|_| h.rank(n.id)),
                core_shape: h.cores()[n.id.layer][n.id.position].shape().to_vec(),
            }
        })
        .collect();
    Inspection {
        order: tree.order(),
        extents: h.extents().to_vec(),
        depth: tree.depth(),
        node_count: tree.node_count(),
        accumulated: h.accumulated(),
        epsilon_rel: h.epsilon_rel(),
        total_params: h.parameter_count(),
        compression_ratio: compression_ratio(h),
        reduction_ratio: reduction_ratio(h),
        batches,
        nodes,
    }
}

impl Inspection {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("order {} extents {:?}\n", self.order, self.extents));
        s.push_str(&format!(
            "tree: {} nodes, depth {}\n",
            self.node_count, self.depth
        ));
        s.push_str(&format!(
            "accumulated {} tensors in {} batches, epsilon {}\n",
            self.accumulated, self.batches, self.epsilon_rel
        ));
        s.push_str(&format!(
            "stored elements {}  CR {:.4}  RR {:.4}\n",
            self.total_params, self.compression_ratio, self.reduction_ratio
        ));
        for n in &self.nodes {
            let rank = n.rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "  ({}, {}) {:<8} dims {:?} rank {} core {:?}\n",
                n.layer, n.position, n.kind, n.dims, rank, n.core_shape
            ));
        }
        s
    }
}
