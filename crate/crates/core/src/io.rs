//! Artifact files.
//!
//! Tasksets are JSON. Meta-parameters, Hessians and influence stores are
//! binary: an 8-byte magic, a `u32` format version, a fixed header, then
//! little-endian `f64` payloads. Score tables are CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{HessianMethod, HessianRep, HessianVariant};
use crate::influence::{InfluenceRecord, ScoreTable, SignConvention};
use crate::linalg::{FactorMatrix, Matrix, SymMatrix};
use crate::metalearn::{Learner, MetaParams, Provenance, Task};
use crate::model::{Activation, Batch, Mlp, MlpSpec};
use crate::taskgen::TaskDistributionSpec;

pub const TASKSET_VERSION: u32 = 1;
pub const BINARY_VERSION: u32 = 1;

const PARAMS_MAGIC: &[u8; 8] = b"MIPARAMS";
const HESSIAN_MAGIC: &[u8; 8] = b"MIHESSN\0";
const INFLUENCE_MAGIC: &[u8; 8] = b"MIINFLU\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchFile {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskFile {
    id: u64,
    #[serde(default)]
    group_id: Option<u64>,
    #[serde(default)]
    provenance: Provenance,
    /// Optional in externally produced files; inferred from the labels.
    #[serde(default)]
    n_ways: Option<usize>,
    /// Optional in externally produced files; inferred from the first row.
    #[serde(default)]
    dim: Option<usize>,
    support: BatchFile,
    query: BatchFile,
}

/// On-disk taskset: the generating distributions (if known) and the tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasksetFile {
    pub version: u32,
    #[serde(default)]
    pub spec: Vec<TaskDistributionSpec>,
    tasks: Vec<TaskFile>,
}

fn batch_to_file(b: &Batch) -> BatchFile {
    BatchFile {
        x: (0..b.len()).map(|i| b.inputs.row(i).to_vec()).collect(),
        y: b.labels.clone(),
    }
}

fn batch_from_file(b: BatchFile, dim: usize) -> Result<Batch> {
    let rows = b.x.len();
    let mut data = Vec::with_capacity(rows * dim);
    for r in b.x {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        data.extend(r);
    }
    Batch::new(Matrix::from_vec(rows, dim, data)?, b.y)
}

impl TasksetFile {
    pub fn new(spec: Vec<TaskDistributionSpec>, tasks: &[Task]) -> Self {
        Self {
            version: TASKSET_VERSION,
            spec,
            tasks: tasks
                .iter()
                .map(|t| TaskFile {
                    id: t.id,
                    group_id: t.group_id,
                    provenance: t.provenance,
                    n_ways: Some(t.n_ways),
                    dim: Some(t.dim()),
                    support: batch_to_file(&t.support),
                    query: batch_to_file(&t.query),
                })
                .collect(),
        }
    }

    pub fn tasks(&self) -> Result<Vec<Task>> {
        self.tasks
            .iter()
            .cloned()
            .map(|t| {
                let dim = t
                    .dim
                    .or_else(|| t.support.x.first().or(t.query.x.first()).map(Vec::len))
                    .unwrap_or(0);
                let n_ways = t.n_ways.unwrap_or_else(|| {
                    t.support
                        .y
                        .iter()
                        .chain(&t.query.y)
                        .max()
                        .map_or(0, |m| m + 1)
                });
                let task = Task {
                    id: t.id,
                    group_id: t.group_id,
                    provenance: t.provenance,
                    n_ways,
                    support: batch_from_file(t.support, dim)?,
                    query: batch_from_file(t.query, dim)?,
                };
                task.validate()?;
                Ok(task)
            })
            .collect()
    }
}

pub fn save_taskset(path: &Path, spec: Vec<TaskDistributionSpec>, tasks: &[Task]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &TasksetFile::new(spec, tasks))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_taskset(path: &Path) -> Result<(Vec<TaskDistributionSpec>, Vec<Task>)> {
    let file: TasksetFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.version != TASKSET_VERSION {
        return Err(Error::Format(format!(
            "unsupported taskset version {}",
            file.version
        )));
    }
    let tasks = file.tasks()?;
    Ok((file.spec, tasks))
}

fn write_header(w: &mut impl Write, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(BINARY_VERSION)?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let v = r.read_u32::<LE>()?;
    if v != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    usize::try_from(r.read_u64::<LE>()?).map_err(|_| Error::Format("length overflows usize".into()))
}

/// Guards allocations driven by header fields.
fn check_size(n: usize, what: &str) -> Result<usize> {
    if n > (1 << 34) {
        return Err(Error::Format(format!("implausible {what} {n}")));
    }
    Ok(n)
}

pub fn write_meta_params(w: &mut impl Write, mp: &MetaParams) -> Result<()> {
    write_header(w, PARAMS_MAGIC)?;
    let (kind, alpha) = match mp.learner {
        Learner::Maml { inner_lr } => (0u8, inner_lr),
        Learner::ProtoNet => (1u8, 0.0),
    };
    w.write_u8(kind)?;
    w.write_f64::<LE>(alpha)?;
    let spec = mp.model.spec();
    w.write_u32::<LE>(spec.layer_widths.len() as u32)?;
    for &width in &spec.layer_widths {
        w.write_u64::<LE>(width as u64)?;
    }
    for a in &spec.activations {
        w.write_u8(match a {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        })?;
    }
    w.write_u64::<LE>(mp.q() as u64)?;
    write_f64s(w, &mp.omega)
}

pub fn read_meta_params(r: &mut impl Read) -> Result<MetaParams> {
    read_header(r, PARAMS_MAGIC, "meta-parameter")?;
    let kind = r.read_u8()?;
    let alpha = r.read_f64::<LE>()?;
    let learner = match kind {
        0 => Learner::Maml { inner_lr: alpha },
        1 => Learner::ProtoNet,
        k => return Err(Error::Format(format!("unknown learner tag {k}"))),
    };
    let layers = check_size(r.read_u32::<LE>()? as usize, "layer count")?;
    let widths = (0..layers)
        .map(|_| read_len(r).and_then(|n| check_size(n, "layer width")))
        .collect::<Result<Vec<_>>>()?;
    let activations = (0..layers.saturating_sub(2))
        .map(|_| match r.read_u8()? {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec {
        layer_widths: widths,
        activations,
    };
    let model = Mlp::new(spec)?;
    let q = read_len(r)?;
    if q != model.param_count() {
        return Err(Error::DimensionMismatch {
            expected: model.param_count(),
            got: q,
        });
    }
    let omega = read_f64s(r, q)?;
    MetaParams::new(model, learner, omega)
}

pub fn save_meta_params(path: &Path, mp: &MetaParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_meta_params(&mut w, mp)?;
    w.flush()?;
    Ok(())
}

pub fn load_meta_params(path: &Path) -> Result<MetaParams> {
    read_meta_params(&mut BufReader::new(File::open(path)?))
}

/// Header after magic and version: variant (`u8`, 0 dense / 1 factored),
/// `q`, `r` (columns; `q` for dense), method (`u8`), task count, capacity
/// flag (`u8`) and capacity.
pub fn write_hessian(w: &mut impl Write, h: &HessianRep) -> Result<()> {
    write_header(w, HESSIAN_MAGIC)?;
    let (tag, q, r) = match &h.variant {
        HessianVariant::Dense(m) => (0u8, m.dim(), m.dim()),
        HessianVariant::Factored(f) => (1u8, f.rows(), f.len()),
    };
    w.write_u8(tag)?;
    w.write_u64::<LE>(q as u64)?;
    w.write_u64::<LE>(r as u64)?;
    w.write_u8(match h.method {
        HessianMethod::Exact => 0,
        HessianMethod::GaussNewton => 1,
    })?;
    w.write_u64::<LE>(h.task_count as u64)?;
    w.write_u8(h.capacity.is_some() as u8)?;
    w.write_u64::<LE>(h.capacity.unwrap_or(0) as u64)?;
    match &h.variant {
        HessianVariant::Dense(m) => write_f64s(w, m.matrix().as_slice()),
        HessianVariant::Factored(f) => f.columns().iter().try_for_each(|c| write_f64s(w, c)),
    }
}

pub fn read_hessian(r: &mut impl Read) -> Result<HessianRep> {
    read_header(r, HESSIAN_MAGIC, "Hessian")?;
    let tag = r.read_u8()?;
    let q = check_size(read_len(r)?, "dimension")?;
    let cols = check_size(read_len(r)?, "column count")?;
    let method = match r.read_u8()? {
        0 => HessianMethod::Exact,
        1 => HessianMethod::GaussNewton,
        t => return Err(Error::Format(format!("unknown Hessian method tag {t}"))),
    };
    let task_count = read_len(r)?;
    let has_cap = r.read_u8()? != 0;
    let cap = read_len(r)?;
    let variant = match tag {
        0 => {
            if cols != q {
                return Err(Error::Format("dense Hessian must be square".into()));
            }
            let m = Matrix::from_vec(q, q, read_f64s(r, q * q)?)?;
            if m != m.transpose() {
                return Err(Error::Format("dense Hessian is not symmetric".into()));
            }
            HessianVariant::Dense(SymMatrix::from_matrix(m)?)
        }
        1 => {
            let columns = (0..cols)
                .map(|_| read_f64s(r, q))
                .collect::<Result<Vec<_>>>()?;
            HessianVariant::Factored(FactorMatrix::from_columns(q, columns)?)
        }
        t => return Err(Error::Format(format!("unknown Hessian variant tag {t}"))),
    };
    Ok(HessianRep {
        variant,
        task_count,
        method,
        capacity: has_cap.then_some(cap),
    })
}

pub fn save_hessian(path: &Path, h: &HessianRep) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_hessian(&mut w, h)?;
    w.flush()?;
    Ok(())
}

pub fn load_hessian(path: &Path) -> Result<HessianRep> {
    read_hessian(&mut BufReader::new(File::open(path)?))
}

/// Header after magic and version: record count `n`, `q`; then per record
/// the task id, a group flag and group id; then the `n × q` row-major
/// influence matrix.
pub fn write_influence(w: &mut impl Write, records: &[InfluenceRecord]) -> Result<()> {
    write_header(w, INFLUENCE_MAGIC)?;
    let q = records.first().map_or(0, |r| r.i_meta.len());
    if let Some(r) = records.iter().find(|r| r.i_meta.len() != q) {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: r.i_meta.len(),
        });
    }
    w.write_u64::<LE>(records.len() as u64)?;
    w.write_u64::<LE>(q as u64)?;
    for r in records {
        w.write_u64::<LE>(r.task_id)?;
        w.write_u8(r.group_id.is_some() as u8)?;
        w.write_u64::<LE>(r.group_id.unwrap_or(0))?;
    }
    records.iter().try_for_each(|r| write_f64s(w, &r.i_meta))
}

pub fn read_influence(r: &mut impl Read) -> Result<Vec<InfluenceRecord>> {
    read_header(r, INFLUENCE_MAGIC, "influence store")?;
    let n = check_size(read_len(r)?, "record count")?;
    let q = check_size(read_len(r)?, "dimension")?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.read_u64::<LE>()?;
        let has = r.read_u8()? != 0;
        let g = r.read_u64::<LE>()?;
        ids.push((id, has.then_some(g)));
    }
    ids.into_iter()
        .map(|(task_id, group_id)| {
            Ok(InfluenceRecord {
                task_id,
                group_id,
                i_meta: read_f64s(r, q)?,
            })
        })
        .collect()
}

pub fn save_influence(path: &Path, records: &[InfluenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_influence(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_influence(path: &Path) -> Result<Vec<InfluenceRecord>> {
    read_influence(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    test_id: u64,
    train_id: u64,
    score: f64,
    rank: usize,
}

/// One row per (test, train) pair: `test_id,train_id,score,rank`.
pub fn write_score_csv(w: impl Write, table: &ScoreTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ranks = table.ranks();
    for (i, &test_id) in table.test_ids.iter().enumerate() {
        for (j, &train_id) in table.train_ids.iter().enumerate() {
            out.serialize(ScoreRow {
                test_id,
                train_id,
                score: table.scores[(i, j)],
                rank: ranks[i][j],
            })
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a score CSV written by [`write_score_csv`]. Row and column order
/// follow first appearance.
pub fn read_score_csv(r: impl Read, sign: SignConvention) -> Result<ScoreTable> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let row: ScoreRow = rec.map_err(csv_err)?;
        rows.push(row);
    }
    let mut test_ids: Vec<u64> = Vec::new();
    let mut train_ids: Vec<u64> = Vec::new();
    for row in &rows {
        if !test_ids.contains(&row.test_id) {
            test_ids.push(row.test_id);
        }
        if !train_ids.contains(&row.train_id) {
            train_ids.push(row.train_id);
        }
    }
    if rows.len() != test_ids.len() * train_ids.len() {
        return Err(Error::Format("score table is not a full grid".into()));
    }
    let mut scores = Matrix::zeros(test_ids.len(), train_ids.len());
    for row in rows {
        let i = test_ids
            .iter()
            .position(|&t| t == row.test_id)
            .expect("seen");
        let j = train_ids
            .iter()
            .position(|&t| t == row.train_id)
            .expect("seen");
        scores[(i, j)] = row.score;
    }
    Ok(ScoreTable {
        test_ids,
        train_ids,
        scores,
        sign,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn save_score_csv(path: &Path, table: &ScoreTable) -> Result<()> {
    write_score_csv(BufWriter::new(File::create(path)?), table)
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
