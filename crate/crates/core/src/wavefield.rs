//! Exact evaluation of superposed 3-d harmonic-oscillator wavefunctions.
//!
//! A wavefunction is a finite superposition of separable eigenstates,
//!
//! ```text
//! Psi(x, t) = sum_j c_j * psi_{n1 n2 n3}(x) * exp(-i E_j t),
//! E_j = sum_k (n_k + 1/2) omega_k,
//! ```
//!
//! so every spatial/time derivative is analytic. Two evaluation paths are
//! provided: the full field `Psi` and its Gaussian-stripped polynomial part
//! `phi` with `Psi = exp(sigma) * phi`, `sigma = -sum_k omega_k x_k^2 / 2`.
//! Velocity-type quantities (ratios of field derivatives to the field) are
//! identical on both paths since `sigma` is real; the `phi` path stays finite
//! near nodes where the Gaussian-weighted field underflows, and is the
//! default for all downstream root finding.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-axis Gaussian log-weight exponent threshold beyond which `exp` underflows.
const GAUSSIAN_UNDERFLOW_EXP: f64 = 708.0;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("wavefunction needs at least one mode")]
    NoModes,
    #[error("mode coefficients are all zero")]
    ZeroNorm,
    #[error("oscillator frequency must be positive, got {0}")]
    NonPositiveFrequency(f64),
}

/// Quantum numbers (n1, n2, n3) of a separable oscillator eigenstate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantumNumbers {
    pub n1: u32,
    pub n2: u32,
    pub n3: u32,
}

impl QuantumNumbers {
    pub fn new(n1: u32, n2: u32, n3: u32) -> Self {
        Self { n1, n2, n3 }
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.n1, self.n2, self.n3]
    }

    /// Eigenenergy `sum_k (n_k + 1/2) omega_k` (units of hbar*omega, hbar = m = 1).
    pub fn energy(&self, omega: &[f64; 3]) -> f64 {
        self.as_array()
            .iter()
            .zip(omega)
            .map(|(&n, &w)| (n as f64 + 0.5) * w)
            .sum()
    }
}

/// One term of the superposition: complex amplitude, quantum numbers, energy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Mode {
    pub coeff: Complex64,
    pub qnums: QuantumNumbers,
    pub energy: f64,
}

/// Superposition of oscillator eigenstates; the single source of truth for
/// all field evaluations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WavefunctionSpec {
    modes: Vec<Mode>,
    omega: [f64; 3],
}

impl WavefunctionSpec {
    /// Builds a spec, computing each mode's energy from its quantum numbers.
    pub fn new(
        modes: Vec<(Complex64, QuantumNumbers)>,
        omega: [f64; 3],
    ) -> Result<Self, SpecError> {
        if modes.is_empty() {
            return Err(SpecError::NoModes);
        }
        for &w in &omega {
            if !(w > 0.0) {
                return Err(SpecError::NonPositiveFrequency(w));
            }
        }
        if modes.iter().map(|(c, _)| c.norm_sqr()).sum::<f64>() <= 0.0 {
            return Err(SpecError::ZeroNorm);
        }
        let modes = modes
            .into_iter()
            .map(|(coeff, qnums)| Mode {
                coeff,
                qnums,
                energy: qnums.energy(&omega),
            })
            .collect();
        Ok(Self { modes, omega })
    }

    /// The equal-weight superposition of the (0,0,0), (1,0,1) and (0,1,2)
    /// eigenstates used by the CLI example configs and the browser demo.
    pub fn demo_superposition(omega: [f64; 3]) -> Self {
        let c = Complex64::new(1.0 / 3.0_f64.sqrt(), 0.0);
        Self::new(
            vec![
                (c, QuantumNumbers::new(0, 0, 0)),
                (c, QuantumNumbers::new(1, 0, 1)),
                (c, QuantumNumbers::new(0, 1, 2)),
            ],
            omega,
        )
        .expect("demo superposition is valid")
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn omega(&self) -> &[f64; 3] {
        &self.omega
    }

    /// True if the flow is static: a single mode (or several modes sharing one
    /// energy and a common phase) has a global phase and zero Bohmian velocity.
    pub fn is_single_mode(&self) -> bool {
        self.modes.len() == 1
    }
}

/// Field value with its analytic first/second spatial derivatives and time
/// derivative at one point. The Hessian is constructed exactly symmetric.
#[derive(Clone, Copy, Debug)]
pub struct FieldSample {
    pub psi: Complex64,
    pub grad: Vector3<Complex64>,
    pub hess: Matrix3<Complex64>,
    pub dpsi_dt: Complex64,
    /// Set when a Gaussian factor underflowed and the sample is an exact zero.
    pub underflow: bool,
}

impl FieldSample {
    pub fn zero() -> Self {
        let z = Complex64::new(0.0, 0.0);
        Self {
            psi: z,
            grad: Vector3::from_element(z),
            hess: Matrix3::from_element(z),
            dpsi_dt: z,
            underflow: false,
        }
    }

    /// Laplacian = trace of the Hessian.
    pub fn laplacian(&self) -> Complex64 {
        self.hess[(0, 0)] + self.hess[(1, 1)] + self.hess[(2, 2)]
    }
}

/// Hermite polynomial `H_n` with first and second derivatives at `xi`.
///
/// Three-term recurrence `H_{k+1} = 2 xi H_k - 2 k H_{k-1}`; derivatives via
/// `H_n' = 2 n H_{n-1}` and `H_n'' = 4 n (n-1) H_{n-2}`.
pub fn hermite_eval(n: u32, xi: f64) -> (f64, f64, f64) {
    if n == 0 {
        return (1.0, 0.0, 0.0);
    }
    // h_prev = H_{k-1}, h = H_k climbing to k = n.
    let mut h_prev = 1.0;
    let mut h = 2.0 * xi;
    let mut h_prev2 = 0.0; // H_{n-2} once the loop ends
    for k in 1..n {
        let next = 2.0 * xi * h - 2.0 * (k as f64) * h_prev;
        h_prev2 = h_prev;
        h_prev = h;
        h = next;
    }
    let nf = n as f64;
    let d1 = 2.0 * nf * h_prev;
    let d2 = if n >= 2 {
        4.0 * nf * (nf - 1.0) * h_prev2
    } else {
        0.0
    };
    (h, d1, d2)
}

/// One separable factor and its x-derivatives, with or without the Gaussian.
#[derive(Clone, Copy)]
struct Factor1D {
    value: f64,
    d1: f64,
    d2: f64,
    underflow: bool,
}

/// `norm * [exp(-w x^2/2)] * H_n(sqrt(w) x)` and derivatives in `x`.
fn eigenstate_factor(omega: f64, n: u32, x: f64, with_gaussian: bool) -> Factor1D {
    let sw = omega.sqrt();
    let xi = sw * x;
    let (h, dh, d2h) = hermite_eval(n, xi);
    // (w/pi)^(1/4) / sqrt(2^n n!)
    let mut norm = (omega / std::f64::consts::PI).powf(0.25);
    for k in 1..=n {
        norm /= (2.0 * k as f64).sqrt();
    }
    if with_gaussian {
        let expo = -0.5 * omega * x * x;
        if expo < -GAUSSIAN_UNDERFLOW_EXP {
            return Factor1D {
                value: 0.0,
                d1: 0.0,
                d2: 0.0,
                underflow: true,
            };
        }
        let g = expo.exp();
        // d/dx [g h] = g (-w x h + sw h'), etc.
        let value = norm * g * h;
        let d1 = norm * g * (-omega * x * h + sw * dh);
        let d2 = norm
            * g
            * (omega * omega * x * x * h - omega * h - 2.0 * omega * x * sw * dh
                + omega * d2h);
        Factor1D {
            value,
            d1,
            d2,
            underflow: false,
        }
    } else {
        Factor1D {
            value: norm * h,
            d1: norm * sw * dh,
            d2: norm * omega * d2h,
            underflow: false,
        }
    }
}

/// A real separable eigenstate with gradient and Hessian.
#[derive(Clone, Copy, Debug)]
pub struct EigenstateSample {
    pub value: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
    pub underflow: bool,
}

fn eval_separable(
    omega: &[f64; 3],
    q: QuantumNumbers,
    x: &Vector3<f64>,
    with_gaussian: bool,
) -> EigenstateSample {
    let qs = q.as_array();
    let f: Vec<Factor1D> = (0..3)
        .map(|k| eigenstate_factor(omega[k], qs[k], x[k], with_gaussian))
        .collect();
    if f.iter().any(|fk| fk.underflow) {
        return EigenstateSample {
            value: 0.0,
            grad: Vector3::zeros(),
            hess: Matrix3::zeros(),
            underflow: true,
        };
    }
    let value = f[0].value * f[1].value * f[2].value;
    let mut grad = Vector3::zeros();
    let mut hess = Matrix3::zeros();
    for i in 0..3 {
        let others: f64 = (0..3).filter(|&k| k != i).map(|k| f[k].value).product();
        grad[i] = f[i].d1 * others;
        hess[(i, i)] = f[i].d2 * others;
        for j in (i + 1)..3 {
            let third: f64 = (0..3)
                .filter(|&k| k != i && k != j)
                .map(|k| f[k].value)
                .product();
            let hij = f[i].d1 * f[j].d1 * third;
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }
    EigenstateSample {
        value,
        grad,
        hess,
        underflow: false,
    }
}

/// Real oscillator eigenstate `psi_{n1 n2 n3}(x)` with analytic derivatives.
///
/// For `|x|` so large that a Gaussian factor underflows, returns exact zero
/// with the `underflow` flag set.
pub fn eval_eigenstate(
    spec: &WavefunctionSpec,
    q: QuantumNumbers,
    x: &Vector3<f64>,
) -> EigenstateSample {
    eval_separable(spec.omega(), q, x, true)
}

fn eval_superposition(
    spec: &WavefunctionSpec,
    x: &Vector3<f64>,
    t: f64,
    with_gaussian: bool,
) -> FieldSample {
    let mut out = FieldSample::zero();
    for mode in spec.modes() {
        let base = eval_separable(spec.omega(), mode.qnums, x, with_gaussian);
        if base.underflow {
            out.underflow = true;
            continue;
        }
        // c_j * exp(-i E_j t), phase carried exactly per mode.
        let phase = mode.coeff * Complex64::cis(-mode.energy * t);
        out.psi += phase * base.value;
        out.dpsi_dt += Complex64::new(0.0, -mode.energy) * phase * base.value;
        for i in 0..3 {
            out.grad[i] += phase * base.grad[i];
            for j in 0..3 {
                out.hess[(i, j)] += phase * base.hess[(i, j)];
            }
        }
    }
    out
}

/// Full field `Psi(x, t)` with analytic gradient, Hessian and time derivative.
pub fn eval_field(spec: &WavefunctionSpec, x: &Vector3<f64>, t: f64) -> FieldSample {
    eval_superposition(spec, x, t, true)
}

/// Polynomial part `phi(x, t)` where `Psi = exp(sigma) phi`,
/// `sigma = -sum_k omega_k x_k^2 / 2`.
///
/// Ratios like the Bohmian velocity `Im(grad Psi / Psi) = Im(grad phi / phi)`
/// are identical on both paths; `phi` stays well-scaled near nodes.
pub fn eval_polynomial_part(
    spec: &WavefunctionSpec,
    x: &Vector3<f64>,
    t: f64,
) -> FieldSample {
    eval_superposition(spec, x, t, false)
}

/// Gaussian log-weight `sigma(x) = -sum_k omega_k x_k^2 / 2`.
pub fn gaussian_log_weight(spec: &WavefunctionSpec, x: &Vector3<f64>) -> f64 {
    -0.5 * spec
        .omega()
        .iter()
        .zip(x.iter())
        .map(|(&w, &xk)| w * xk * xk)
        .sum::<f64>()
}

/// RMS magnitude of the polynomial part over a fixed 32-point spherical shell
/// of radius 2. Used to scale absolute node/X-point tolerances; deterministic.
pub fn field_scale(spec: &WavefunctionSpec, t: f64) -> f64 {
    let n = 32;
    let radius = 2.0;
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let mut acc = 0.0;
    for i in 0..n {
        // Fibonacci sphere points.
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let p = Vector3::new(r * th.cos(), r * th.sin(), z) * radius;
        acc += eval_polynomial_part(spec, &p, t).psi.norm_sqr();
    }
    (acc / n as f64).sqrt()
}
