//! Reference solutions for evaluation. Never used by training.
//!
//! Grids are cached on disk in a small little-endian binary format:
//!
//! ```text
//! magic    8 bytes  "ATPNREF\0"
//! version  u32      1
//! name     u32 length + UTF-8 bytes
//! params   u32 count, then per entry: u32 length + UTF-8 key, f64 value
//! ndim     u32
//! extents  ndim x u64
//! axes     f64 values, axis by axis
//! values   f64 values, row-major with the first axis slowest
//! ```

mod allen_cahn;
mod burgers;
mod multiscale;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub use allen_cahn::{allen_cahn_reference, AllenCahnSolver};
pub use burgers::{burgers_fd_solution, burgers_reference, burgers_reference_grid, gauss_hermite, BurgersFd};
pub use multiscale::{multiscale_discrete_residual, multiscale_reference, multiscale_solve};

use crate::error::{Error, Result};
use crate::pde::{poisson_exact, Benchmark, PdeProblem};
use crate::tensor::Tensor;

/// Points per dimension of the evaluation grid.
pub const EVAL_POINTS: usize = 256;

const MAGIC: &[u8; 8] = b"ATPNREF\0";
const VERSION: u32 = 1;

/// Reference values on a Cartesian product of axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl ReferenceGrid {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Oracle("reference grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.is_empty() || a.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Oracle(format!("axis {i} must be non-empty and strictly increasing")));
            }
        }
        let len: usize = axes.iter().map(Vec::len).product();
        if len != values.len() {
            return Err(Error::Oracle(format!(
                "grid expects {len} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Oracle(format!("non-finite reference value at flat index {i}")));
        }
        Ok(Self { axes, values })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    pub fn value(&self, idx: &[usize]) -> f64 {
        self.values[self.flat_index(idx)]
    }

    /// All grid points as an `(len, dim)` matrix in value order.
    pub fn points(&self) -> Tensor {
        let d = self.dim();
        let shape = self.shape();
        let mut data = Vec::with_capacity(self.len() * d);
        let mut idx = vec![0usize; d];
        for _ in 0..self.len() {
            for (j, &i) in idx.iter().enumerate() {
                data.push(self.axes[j][i]);
            }
            for j in (0..d).rev() {
                idx[j] += 1;
                if idx[j] < shape[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        Tensor::matrix(self.len(), d, data).expect("sized above")
    }

    pub fn max_abs_diff(&self, other: &ReferenceGrid) -> Result<f64> {
        if self.axes != other.axes {
            return Err(Error::Oracle("grids have different axes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn write_to<W: Write>(&self, mut w: W, name: &str, params: &[(&str, f64)]) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, name)?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (k, v) in params {
            write_str(&mut w, k)?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for a in &self.axes {
            w.write_all(&(a.len() as u64).to_le_bytes())?;
        }
        for v in self.axes.iter().flatten().chain(&self.values) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a grid, returning it with the stored name and parameters.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, String, Vec<(String, f64)>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Oracle("not a reference-grid file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Oracle(format!("unsupported reference-grid version {version}")));
        }
        let name = read_str(&mut r)?;
        let n_params = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let k = read_str(&mut r)?;
            params.push((k, read_f64(&mut r)?));
        }
        let ndim = read_u32(&mut r)? as usize;
        let extents = (0..ndim)
            .map(|_| {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                Ok(u64::from_le_bytes(b) as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        let axes = extents
            .iter()
            .map(|&n| (0..n).map(|_| read_f64(&mut r)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let total: usize = extents.iter().product();
        let values = (0..total).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Ok((Self::new(axes, values)?, name, params))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::Oracle("corrupt string length in reference-grid file".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Oracle("non-UTF-8 string in reference-grid file".into()))
}

/// `n` equally spaced points from `lo` to `hi`, both included exactly.
pub fn uniform_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// The evaluation grid axes for a problem.
pub fn evaluation_axes(problem: &PdeProblem) -> Vec<Vec<f64>> {
    let d = problem.domain();
    (0..problem.dim())
        .map(|i| uniform_axis(d.lo()[i], d.hi()[i], EVAL_POINTS))
        .collect()
}

/// Discretization of each oracle; part of the cache key.
pub fn oracle_params(problem: &PdeProblem) -> Vec<(&'static str, f64)> {
    match problem.benchmark() {
        Benchmark::Poisson2d => vec![("points", EVAL_POINTS as f64)],
        Benchmark::Burgers => vec![("points", EVAL_POINTS as f64), ("hermite_order", burgers::HERMITE_ORDER as f64)],
        Benchmark::AllenCahn => vec![
            ("points", EVAL_POINTS as f64),
            ("modes", allen_cahn::DEFAULT_MODES as f64),
            ("substeps", allen_cahn::DEFAULT_SUBSTEPS as f64),
        ],
        Benchmark::Multiscale => vec![("cells", multiscale::DEFAULT_CELLS as f64)],
    }
}

/// Computes the reference grid without touching any cache.
pub fn build_reference(problem: &PdeProblem) -> Result<ReferenceGrid> {
    match problem.benchmark() {
        Benchmark::Poisson2d => {
            let axes = evaluation_axes(problem);
            let mut values = Vec::with_capacity(EVAL_POINTS * EVAL_POINTS);
            for &x in &axes[0] {
                for &y in &axes[1] {
                    values.push(poisson_exact(x, y));
                }
            }
            ReferenceGrid::new(axes, values)
        }
        Benchmark::Burgers => {
            let axes = evaluation_axes(problem);
            burgers_reference_grid(&axes[0], &axes[1])
        }
        Benchmark::AllenCahn => {
            allen_cahn_reference(allen_cahn::DEFAULT_MODES, allen_cahn::DEFAULT_SUBSTEPS, EVAL_POINTS)
        }
        Benchmark::Multiscale => multiscale_reference(multiscale::DEFAULT_CELLS),
    }
}

pub fn cache_path(dir: &Path, problem: &PdeProblem) -> PathBuf {
    let key: Vec<String> = oracle_params(problem)
        .iter()
        .map(|(k, v)| format!("{k}{v}"))
        .collect();
    dir.join(format!("{}-{}.ref", problem.name(), key.join("-")))
}

/// Loads the cached grid if present and matching, otherwise builds and
/// stores it.
pub fn load_or_build(problem: &PdeProblem, cache_dir: Option<&Path>) -> Result<ReferenceGrid> {
    let Some(dir) = cache_dir else {
        return build_reference(problem);
    };
    let path = cache_path(dir, problem);
    let params = oracle_params(problem);
    if let Ok(file) = fs::File::open(&path) {
        let (grid, name, stored) = ReferenceGrid::read_from(std::io::BufReader::new(file))?;
        let same = name == problem.name()
            && stored.len() == params.len()
            && stored.iter().zip(&params).all(|((k, v), (k2, v2))| k == k2 && v == v2);
        if same {
            return Ok(grid);
        }
    }
    let grid = build_reference(problem)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("ref.tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        grid.write_to(&mut w, problem.name(), &params)?;
        w.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(grid)
}

/// Lagrange interpolation through the 4 nearest samples of a uniform 1-D
/// grid (clamped at the ends).
pub fn interp_uniform_cubic(axis: &[f64], values: &[f64], x: f64) -> f64 {
    let n = axis.len();
    if n < 4 {
        return values[0];
    }
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    let s = (x - axis[0]) / h;
    let i0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let mut out = 0.0;
    for j in 0..4 {
        let mut l = 1.0;
        for m in 0..4 {
            if m != j {
                l *= (s - (i0 + m) as f64) / (j as f64 - m as f64);
            }
        }
        out += l * values[i0 + j];
    }
    out
}

/// Tridiagonal solve; `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let a = if i == 0 { 0.0 } else { lower[i] };
        let denom = diag[i] - a * if i == 0 { 0.0 } else { c[i - 1] };
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Oracle(format!("singular tridiagonal system at row {i}")));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - a * if i == 0 { 0.0 } else { d[i - 1] }) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Inverse of a dense row-major `n x n` matrix by Gauss-Jordan elimination
/// with partial pivoting.
pub(crate) fn invert(mut a: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        let p = a[piv * n + col];
        if p == 0.0 || !p.is_finite() {
            return Err(Error::Oracle(format!("singular matrix at column {col}")));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
                inv.swap(piv * n + k, col * n + k);
            }
        }
        let ip = 1.0 / p;
        for k in 0..n {
            a[col * n + k] *= ip;
            inv[col * n + k] *= ip;
        }
        let (pivot_a, pivot_inv) = (a[col * n..(col + 1) * n].to_vec(), inv[col * n..(col + 1) * n].to_vec());
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f != 0.0 {
                for k in 0..n {
                    a[r * n + k] -= f * pivot_a[k];
                    inv[r * n + k] -= f * pivot_inv[k];
                }
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_solvers() {
        let x = thomas(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let inv = invert(vec![0.0, 2.0, 1.0, 1.0], 2).unwrap();
        let expect = [-0.5, 1.0, 0.5, 0.0];
        for (a, b) in inv.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(invert(vec![1.0, 2.0, 2.0, 4.0], 2).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(ReferenceGrid::new(vec![vec![0.0, 0.0]], vec![1.0, 2.0]).is_err());
        assert!(ReferenceGrid::new(vec![vec![0.0, 1.0]], vec![1.0]).is_err());
        assert!(ReferenceGrid::new(vec![vec![0.0, 1.0]], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn points_follow_value_order() {
        let g = ReferenceGrid::new(vec![vec![0.0, 1.0], vec![5.0, 6.0, 7.0]], (0..6).map(f64::from).collect()).unwrap();
        let p = g.points();
        assert_eq!(p.row(1), &[0.0, 6.0]);
        assert_eq!(p.row(3), &[1.0, 5.0]);
        assert_eq!(g.value(&[1, 0]), 3.0);
    }

    #[test]
    fn binary_round_trip() {
        let g = ReferenceGrid::new(vec![vec![-1.0, 0.5], vec![0.0, 0.1, 1.0]], vec![0.1, 0.2, -0.3, 1e-300, 7.0, 8.5]).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf, "toy", &[("modes", 512.0)]).unwrap();
        let (back, name, params) = ReferenceGrid::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert_eq!(name, "toy");
        assert_eq!(params, vec![("modes".to_string(), 512.0)]);
        buf[0] = b'X';
        assert!(ReferenceGrid::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn axis_endpoints_are_exact() {
        let a = uniform_axis(-1.0, 1.0, 256);
        assert_eq!((a[0], a[255]), (-1.0, 1.0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cubic_interp_is_exact_on_cubics() {
        let axis = uniform_axis(0.0, 2.0, 11);
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
        let vals: Vec<f64> = axis.iter().map(|&x| f(x)).collect();
        for x in [0.0, 0.03, 0.77, 1.5, 1.99, 2.0] {
            assert!((interp_uniform_cubic(&axis, &vals, x) - f(x)).abs() < 1e-13);
        }
    }
}
