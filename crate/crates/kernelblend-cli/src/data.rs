//! File I/O: training CSV (`x1,..,xd,y`), dense kernel matrices (no header),
//! prediction inputs, and atomic writes (temp file + rename, so interrupted
//! runs never leave partial outputs).

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::config::{KernelConfig, RunConfig};
use crate::error::CliError;
use kernelblend_core::{build_base_kernels, BaseKernelSet, KernelFunctionSpec};

pub struct TrainingData {
    pub inputs: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Reads `x1,..,xd,y` rows; the header fixes the input dimension.
pub fn read_training_csv(path: &Path) -> Result<TrainingData, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("bad header in {}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "y" {
        return Err(CliError::data(format!(
            "{} must have header x1,..,xd,y; got {:?}",
            path.display(),
            cols
        )));
    }
    for (i, c) in cols[..cols.len() - 1].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(CliError::data(format!(
                "{}: expected column x{} in position {}, got '{c}'",
                path.display(),
                i + 1,
                i
            )));
        }
    }
    let d = cols.len() - 1;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::data(format!("{} row {row_idx}: {e}", path.display())))?;
        if record.len() != d + 1 {
            return Err(CliError::data(format!(
                "{} row {row_idx}: expected {} fields, got {}",
                path.display(),
                d + 1,
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::data(format!(
                    "{} row {row_idx} column {col}: '{field}' is not a number",
                    path.display()
                ))
            })?;
            if col < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(CliError::data(format!("{} contains no data rows", path.display())));
    }
    let n = ys.len();
    let inputs = DMatrix::from_fn(n, d, |i, j| xs[i * d + j]);
    Ok(TrainingData { inputs, y: DVector::from_vec(ys) })
}

/// Reads prediction inputs: `x1,..,xd` (a trailing `y` column is tolerated
/// and ignored). May be empty.
pub fn read_test_csv(path: &Path, d: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("bad header in {}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_y = cols.last() == Some(&"y");
    let x_cols = if has_y { cols.len() - 1 } else { cols.len() };
    if x_cols != d {
        return Err(CliError::data(format!(
            "{} has {} input columns but the model was trained on {d}",
            path.display(),
            x_cols
        )));
    }
    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::data(format!("{} row {row_idx}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(d);
        for field in record.iter().take(d) {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::data(format!(
                    "{} row {row_idx}: '{field}' is not a number",
                    path.display()
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Dense n x n kernel matrix: n rows of n comma-separated reals, no header.
pub fn read_kernel_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::data(format!("{} row {row_idx}: {e}", path.display())))?;
        let row: Result<Vec<f64>, CliError> = record
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    CliError::data(format!(
                        "{} row {row_idx}: '{f}' is not a number",
                        path.display()
                    ))
                })
            })
            .collect();
        rows.push(row?);
    }
    let n = rows.len();
    if n == 0 {
        return Err(CliError::data(format!("{} is empty", path.display())));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::data(format!("{} is not a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Builds the base kernel set from the config: kernel functions evaluated on
/// the training inputs, precomputed matrices ingested from CSV.
pub fn build_kernels(
    config: &RunConfig,
    config_dir: &Path,
    data: &TrainingData,
) -> Result<BaseKernelSet, CliError> {
    let set = if config.has_precomputed_kernels() {
        let mut mats = Vec::new();
        let mut names = Vec::new();
        for k in &config.kernels {
            match k.kind.as_str() {
                "precomputed" => {
                    let rel = k.path.as_deref().expect("validated");
                    let path = config_dir.join(rel);
                    let mat = read_kernel_csv(&path)?;
                    if mat.nrows() != data.y.len() {
                        return Err(CliError::data(format!(
                            "kernel {} is {}x{} but there are {} training rows",
                            path.display(),
                            mat.nrows(),
                            mat.ncols(),
                            data.y.len()
                        )));
                    }
                    names.push(rel.to_string());
                    mats.push(mat);
                }
                _ => {
                    let spec = kernel_spec(k)?;
                    let single =
                        build_base_kernels(&[spec], data.inputs.clone())
                            .map_err(CliError::from_core_data)?;
                    names.push(single.names()[0].clone());
                    mats.push(single.base(0).clone());
                }
            }
        }
        BaseKernelSet::from_matrices(mats, names).map_err(CliError::from_core_data)?
    } else {
        let specs: Result<Vec<KernelFunctionSpec>, CliError> =
            config.kernels.iter().map(kernel_spec).collect();
        build_base_kernels(&specs?, data.inputs.clone()).map_err(CliError::from_core_data)?
    };
    if config.normalize_kernels {
        set.with_unit_trace().map_err(CliError::from_core_data)
    } else {
        Ok(set)
    }
}

pub fn kernel_spec(k: &KernelConfig) -> Result<KernelFunctionSpec, CliError> {
    match k.kind.as_str() {
        "linear" => Ok(KernelFunctionSpec::Linear),
        "squared-exponential" => KernelFunctionSpec::squared_exponential(
            k.lengthscale.expect("validated"),
            k.signal_variance.expect("validated"),
        )
        .map_err(CliError::from_core_config),
        other => Err(CliError::config(format!(
            "kernel kind '{other}' has no kernel function; cross-kernel evaluation \
             is impossible for precomputed matrices"
        ))),
    }
}

/// Writes a file atomically: the content lands under a temporary name in the
/// same directory and is renamed into place.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, content)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::data(format!("cannot move into place {}: {e}", path.display())))?;
    Ok(())
}
