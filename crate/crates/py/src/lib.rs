//! Python bindings. Images cross the boundary as nested lists (rows of
//! pixels); sequences, lineages and reports stay on the Rust side or travel
//! as JSON strings.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmtrack::attention::{self, AttentionParams, Matrix};
use mmtrack::geometry::{Grid, ImageShape, LabelMap, Lineage};
use mmtrack::metrics::{self, Annotated, EvalConfig};
use mmtrack::segmenter::{self, WatershedConfig};
use mmtrack::simulator::{self, SimConfig, SimSequence};
use mmtrack::tensor_io::{self, Tensor, TensorData};
use mmtrack::tracker::{self, PipelineConfig};
use mmtrack::truth_maps;

create_exception!(mmtrack, MmtrackError, PyException);

fn py_err(e: mmtrack::Error) -> PyErr {
    MmtrackError::new_err(format!("{}: {e}", e.kind()))
}

fn grid_from_rows<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Grid<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(MmtrackError::new_err("rows must all have the same length"));
    }
    Grid::from_vec(ImageShape::new(h, w), rows.into_iter().flatten().collect()).map_err(py_err)
}

fn rows_from_grid<T: Copy>(g: &Grid<T>) -> Vec<Vec<T>> {
    let w = g.shape().width.max(1);
    g.data().chunks(w).map(<[T]>::to_vec).collect()
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let g = grid_from_rows(rows)?;
    let s = g.shape();
    Matrix::from_vec(s.height, s.width, g.into_vec()).map_err(py_err)
}

fn rows_from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A simulated sequence with its ground-truth lineage.
#[pyclass(name = "Sequence", module = "mmtrack")]
struct PySequence {
    inner: SimSequence,
}

#[pymethods]
impl PySequence {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.shape.height, self.inner.shape.width)
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.labels.len()
    }

    fn labels(&self, frame: usize) -> PyResult<Vec<Vec<u32>>> {
        self.inner.labels.get(frame).map(rows_from_grid).ok_or_else(|| MmtrackError::new_err("frame out of range"))
    }

    fn intensity(&self, frame: usize) -> PyResult<Option<Vec<Vec<f32>>>> {
        match &self.inner.intensity {
            None => Ok(None),
            Some(v) => v.get(frame).map(|g| Some(rows_from_grid(g))).ok_or_else(|| MmtrackError::new_err("frame out of range")),
        }
    }

    fn lineage_json(&self) -> PyResult<String> {
        self.inner.lineage.to_json().map_err(py_err)
    }

    /// Number of division events in the ground truth.
    fn num_divisions(&self) -> usize {
        self.inner.lineage.divisions().len()
    }

    /// Run the pipeline on the sequence's own maps (optionally with noise)
    /// and return the evaluation report as JSON.
    #[pyo3(signature = (noise_sigma = 0.0, seed = 0))]
    fn oracle_report(&self, noise_sigma: f64, seed: u64) -> PyResult<String> {
        let seq = &self.inner;
        let maps = truth_maps::truth_maps(&seq.labels, &seq.lineage).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut e, mut d, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for m in maps {
            let (em, dm) = if noise_sigma > 0.0 {
                truth_maps::corrupt_maps(&m.edm, &m.displacement, noise_sigma, &mut rng).map_err(py_err)?
            } else {
                (m.edm, m.displacement)
            };
            e.push(em);
            d.push(dm);
            c.push(m.categories);
        }
        let out = tracker::run_pipeline(&e, &d, Some(&c), &PipelineConfig::default()).map_err(py_err)?;
        let report = metrics::evaluate(
            Annotated { labels: &seq.labels, lineage: &seq.lineage },
            Annotated { labels: &out.labels, lineage: &out.lineage },
            &EvalConfig::default(),
        )
        .map_err(py_err)?;
        serde_json::to_string(&report).map_err(|e| MmtrackError::new_err(e.to_string()))
    }
}

/// Simulate a sequence from an optional JSON configuration.
#[pyfunction]
#[pyo3(signature = (config_json = None, seed = None))]
fn simulate(config_json: Option<&str>, seed: Option<u64>) -> PyResult<PySequence> {
    let mut cfg: SimConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| MmtrackError::new_err(format!("Json: {e}")))?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(PySequence { inner: simulator::simulate(&cfg).map_err(py_err)? })
}

/// Euclidean distance map of a label image.
#[pyfunction]
fn compute_edm(labels: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
    let l: LabelMap = grid_from_rows(labels)?;
    Ok(rows_from_grid(&truth_maps::compute_edm(&l)))
}

#[pyfunction]
#[pyo3(signature = (edm, foreground_threshold = 1.0, merge_threshold = 1.5))]
fn watershed(edm: Vec<Vec<f64>>, foreground_threshold: f64, merge_threshold: f64) -> PyResult<Vec<Vec<u32>>> {
    let cfg = WatershedConfig { foreground_threshold, merge_threshold, ..WatershedConfig::default() };
    cfg.validate().map_err(py_err)?;
    let e = grid_from_rows(edm)?;
    Ok(rows_from_grid(&segmenter::watershed_segment(&e, &cfg)))
}

/// Evaluate two lineages given as JSON with their label stacks.
#[pyfunction]
fn evaluate(gt_labels: Vec<Vec<Vec<u32>>>, gt_lineage: &str, pred_labels: Vec<Vec<Vec<u32>>>, pred_lineage: &str) -> PyResult<String> {
    let to_stack = |v: Vec<Vec<Vec<u32>>>| v.into_iter().map(grid_from_rows).collect::<PyResult<Vec<_>>>();
    let (gl, pl) = (to_stack(gt_labels)?, to_stack(pred_labels)?);
    let glin = Lineage::from_json(gt_lineage).map_err(py_err)?;
    let plin = Lineage::from_json(pred_lineage).map_err(py_err)?;
    let report = metrics::evaluate(
        Annotated { labels: &gl, lineage: &glin },
        Annotated { labels: &pl, lineage: &plin },
        &EvalConfig::default(),
    )
    .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| MmtrackError::new_err(e.to_string()))
}

/// Self-attention with seeded random parameters; returns (output, weights).
#[pyfunction]
#[pyo3(signature = (features, d_k, d_out, seed = 0, embedding = false))]
fn self_attention(features: Vec<Vec<f64>>, d_k: usize, d_out: usize, seed: u64, embedding: bool) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let h = matrix_from_rows(features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AttentionParams::random(h.rows(), h.cols(), d_k, d_out, embedding, &mut rng);
    let out = attention::self_attention_forward(&h, &params).map_err(py_err)?;
    Ok((rows_from_matrix(&out.output), rows_from_matrix(&out.weights)))
}

#[pyfunction]
fn attention_sum_x(weights: Vec<Vec<f64>>, s_y: usize, s_x: usize) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix_from_rows(weights)?;
    Ok(rows_from_matrix(&attention::attention_matrix_sum_x(&a, s_y, s_x).map_err(py_err)?))
}

/// Read a tensor file as (dims, dtype name, flat values).
#[pyfunction]
fn read_tensor(path: &str) -> PyResult<(Vec<usize>, String, Vec<f64>)> {
    let t = tensor_io::read_tensor(path).map_err(py_err)?;
    let (name, values) = match t.data {
        TensorData::U16(v) => ("u16", v.into_iter().map(f64::from).collect()),
        TensorData::F32(v) => ("f32", v.into_iter().map(f64::from).collect()),
        TensorData::U8(v) => ("u8", v.into_iter().map(f64::from).collect()),
    };
    Ok((t.dims, name.to_string(), values))
}

#[pyfunction]
fn write_tensor(path: &str, dims: Vec<usize>, dtype: &str, values: Vec<f64>) -> PyResult<()> {
    let data = match dtype {
        "u16" => TensorData::U16(values.iter().map(|&v| v as u16).collect()),
        "f32" => TensorData::F32(values.iter().map(|&v| v as f32).collect()),
        "u8" => TensorData::U8(values.iter().map(|&v| v as u8).collect()),
        other => return Err(MmtrackError::new_err(format!("unknown dtype {other}"))),
    };
    let t = Tensor::new(dims, data).map_err(py_err)?;
    tensor_io::write_tensor(path, &t).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "mmtrack")]
fn mmtrack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MmtrackError", m.py().get_type::<MmtrackError>())?;
    m.add_class::<PySequence>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_edm, m)?)?;
    m.add_function(wrap_pyfunction!(watershed, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(self_attention, m)?)?;
    m.add_function(wrap_pyfunction!(attention_sum_x, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    Ok(())
}
