//! Double-integrator dynamics and the stacked horizon prediction `X = M_x x0 + M_u U`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Longitudinal state `[position, speed]`.
pub type State2<T> = [T; 2];

/// `x(k+1) = A x(k) + B u(k)` with `A = [[1, tau], [0, 1]]`, `B = [tau^2 / 2, tau]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDynamics<T> {
    pub a: [[T; 2]; 2],
    pub b: [T; 2],
    pub tau: T,
}

impl<T: Scalar> LinearDynamics<T> {
    pub fn step(&self, x: State2<T>, u: T) -> State2<T> {
        [
            self.a[0][0] * x[0] + self.a[0][1] * x[1] + self.b[0] * u,
            self.a[1][0] * x[0] + self.a[1][1] * x[1] + self.b[1] * u,
        ]
    }

    fn a_matrix(&self) -> DMatrix<T> {
        DMatrix::from_row_slice(2, 2, &[self.a[0][0], self.a[0][1], self.a[1][0], self.a[1][1]])
    }

    fn b_matrix(&self) -> DMatrix<T> {
        DMatrix::from_column_slice(2, 1, &self.b)
    }
}

pub fn build_dynamics<T: Scalar>(tau: T) -> Result<LinearDynamics<T>> {
    if !(tau > T::zero()) {
        return Err(invalid(format!("step length must be positive, got {tau}")));
    }
    let (zero, one) = (T::zero(), T::one());
    Ok(LinearDynamics {
        a: [[one, tau], [zero, one]],
        b: [tau * tau / T::lit(2.0), tau],
        tau,
    })
}

/// Stacked prediction over `np = nc + 1` steps; the last input is held for the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices<T: Scalar> {
    /// `(2 np) x 2`, block row `n` is `A^(n+1)`.
    pub m_x: DMatrix<T>,
    /// `(2 np) x nc`, block lower triangular.
    pub m_u: DMatrix<T>,
    pub np: usize,
    pub nc: usize,
}

impl<T: Scalar> PredictionMatrices<T> {
    /// Row index of the predicted position at horizon step `n` (1-based).
    pub fn position_row(n: usize) -> usize {
        2 * (n - 1)
    }

    pub fn speed_row(n: usize) -> usize {
        2 * (n - 1) + 1
    }

    /// Free response `M_x x0`.
    pub fn free_response(&self, x0: State2<T>) -> DVector<T> {
        &self.m_x * DVector::from_column_slice(&x0)
    }
}

pub fn build_prediction<T: Scalar>(
    dynamics: &LinearDynamics<T>,
    np: usize,
    nc: usize,
) -> Result<PredictionMatrices<T>> {
    if nc < 1 || np != nc + 1 {
        return Err(invalid(format!("need np = nc + 1 with nc >= 1, got np={np}, nc={nc}")));
    }
    let a = dynamics.a_matrix();
    let b = dynamics.b_matrix();

    // powers[k] = A^k
    let mut powers = vec![DMatrix::<T>::identity(2, 2)];
    for k in 1..=np {
        let next = &powers[k - 1] * &a;
        powers.push(next);
    }

    let mut m_x = DMatrix::<T>::zeros(2 * np, 2);
    let mut m_u = DMatrix::<T>::zeros(2 * np, nc);
    for i in 0..np {
        m_x.view_mut((2 * i, 0), (2, 2)).copy_from(&powers[i + 1]);
        // state after step i+1 = sum over applied inputs m = 0..=i of A^(i-m) B u_applied(m),
        // where u_applied(m) = U[min(m, nc-1)]
        for m in 0..=i {
            let j = m.min(nc - 1);
            let block = &powers[i - m] * &b;
            let mut target = m_u.view_mut((2 * i, j), (2, 1));
            target += block;
        }
    }
    Ok(PredictionMatrices { m_x, m_u, np, nc })
}

/// Stacked states `[x(1), v(1), ..., x(np), v(np)]`.
pub fn predict<T: Scalar>(
    mats: &PredictionMatrices<T>,
    x0: State2<T>,
    inputs: &[T],
) -> Result<DVector<T>> {
    if inputs.len() != mats.nc {
        return Err(Error::Dimension(format!(
            "expected {} inputs, got {}",
            mats.nc,
            inputs.len()
        )));
    }
    let u = DVector::from_column_slice(inputs);
    Ok(mats.free_response(x0) + &mats.m_u * u)
}
