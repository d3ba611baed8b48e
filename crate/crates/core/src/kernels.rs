//! Second-order smoothing kernels and their scaled versions `K_h(x) = K(x / h) / h`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width used when integrating kernels with unbounded support.
pub const TRUNCATION_RADIUS: f64 = 12.0;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Uniform,
    Triangular,
    #[default]
    Epanechnikov,
    Quartic,
    Triweight,
    Tricube,
    Gaussian,
    Cosine,
    Logistic,
    Sigmoid,
}

impl Kernel {
    pub const ALL: [Kernel; 10] = [
        Kernel::Uniform,
        Kernel::Triangular,
        Kernel::Epanechnikov,
        Kernel::Quartic,
        Kernel::Triweight,
        Kernel::Tricube,
        Kernel::Gaussian,
        Kernel::Cosine,
        Kernel::Logistic,
        Kernel::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Uniform => "uniform",
            Kernel::Triangular => "triangular",
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Quartic => "quartic",
            Kernel::Triweight => "triweight",
            Kernel::Tricube => "tricube",
            Kernel::Gaussian => "gaussian",
            Kernel::Cosine => "cosine",
            Kernel::Logistic => "logistic",
            Kernel::Sigmoid => "sigmoid",
        }
    }

    /// True when the kernel vanishes outside `|u| <= 1`.
    pub fn is_compact(self) -> bool {
        !matches!(self, Kernel::Gaussian | Kernel::Logistic | Kernel::Sigmoid)
    }

    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        if self.is_compact() && a > 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Uniform => 0.5,
            Kernel::Triangular => 1.0 - a,
            Kernel::Epanechnikov => 0.75 * (1.0 - u * u),
            Kernel::Quartic => {
                let s = 1.0 - u * u;
                15.0 / 16.0 * s * s
            }
            Kernel::Triweight => {
                let s = 1.0 - u * u;
                35.0 / 32.0 * s * s * s
            }
            Kernel::Tricube => {
                let s = 1.0 - a * a * a;
                70.0 / 81.0 * s * s * s
            }
            Kernel::Gaussian => FRAC_1_SQRT_2PI * (-0.5 * u * u).exp(),
            Kernel::Cosine => FRAC_PI_4 * (FRAC_PI_2 * u).cos(),
            Kernel::Logistic => {
                // 1 / (e^u + 2 + e^-u) written to avoid overflow
                let e = (-a).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Kernel::Sigmoid => {
                let e = (-a).exp();
                2.0 / PI * e / (1.0 + e * e)
            }
        }
    }

    /// `K_h(x) = K(x / h) / h`.
    pub fn scaled_eval(self, h: Bandwidth, x: f64) -> f64 {
        self.eval(x / h.get()) / h.get()
    }

    /// Numerical moments `(∫K, ∫uK, ∫u²K, ∫K²)`.
    pub fn moments(self) -> KernelMoments {
        let r = if self.is_compact() {
            1.0
        } else {
            TRUNCATION_RADIUS
        };
        // composite Simpson on an even number of panels
        let n = 20_000usize;
        let step = 2.0 * r / n as f64;
        let mut m = [0.0f64; 4];
        for i in 0..=n {
            let u = -r + i as f64 * step;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let k = self.eval(u);
            m[0] += w * k;
            m[1] += w * u * k;
            m[2] += w * u * u * k;
            m[3] += w * k * k;
        }
        let s = step / 3.0;
        KernelMoments {
            m0: m[0] * s,
            m1: m[1] * s,
            m2: m[2] * s,
            k2int: m[3] * s,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Usage(format!("unknown kernel '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMoments {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub k2int: f64,
}

/// A strictly positive kernel bandwidth, in treatment units.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self> {
        if h > 0.0 && h.is_finite() {
            Ok(Self(h))
        } else {
            Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Bandwidth {
    type Error = Error;
    fn try_from(h: f64) -> Result<Self> {
        Self::new(h)
    }
}

impl From<Bandwidth> for f64 {
    fn from(h: Bandwidth) -> f64 {
        h.0
    }
}

/// `K_h(x)` with a raw bandwidth, rejecting `h <= 0`.
pub fn scaled_eval(kernel: Kernel, h: f64, x: f64) -> Result<f64> {
    Ok(kernel.scaled_eval(Bandwidth::new(h)?, x))
}
