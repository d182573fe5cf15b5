//! Control problem definition: dynamics, costs, their x-derivatives and the
//! action box, plus built-in benchmark problems and sampled assumption checks.

mod builtin;
mod ledger;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use builtin::{build_builtin_problem, builtin_names, builtin_parameter_keys, Params};
pub use ledger::ConstantsLedger;
pub(crate) use validate::{sample_ball, sample_box};
pub use validate::{validate_assumptions, AssumptionReport, ConstantCheck, SamplingConfig};

/// `(t, x, a, out)`: writes an `R^n` vector or an `n×n` matrix into `out`.
pub type StateActionFn<T> = Arc<dyn Fn(T, &[T], &[T], &mut [T]) + Send + Sync>;
/// `(t, x, out)`: writes the row-major `n×d` diffusion matrix.
pub type DiffusionFn<T> = Arc<dyn Fn(T, &[T], &mut [T]) + Send + Sync>;
/// `(t, out)`: writes `D_xσ` as an `n × (n·d)` array, entry `[k][i·d + j] = ∂σ_ij/∂x_k`.
pub type TimeFn<T> = Arc<dyn Fn(T, &mut [T]) + Send + Sync>;
pub type RunningCostFn<T> = Arc<dyn Fn(T, &[T], &[T]) -> T + Send + Sync>;
pub type TerminalCostFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;
pub type TerminalGradFn<T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// Compact box `[lower, upper] ⊂ R^m` of admissible actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> ActionBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension(format!(
                "action box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::InvalidParameter {
                    key: format!("action_box[{i}]"),
                    reason: format!("need finite lower <= upper, got [{l}, {u}]"),
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(m: usize, half_width: T) -> Result<Self> {
        Self::new(vec![-half_width; m], vec![half_width; m])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, a: &[T]) -> bool {
        a.len() == self.dim()
            && a
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| v >= l && v <= u)
    }

    pub fn clamp(&self, a: &mut [T]) {
        for (v, (l, u)) in a.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.max(*l).min(*u);
        }
    }

    pub fn midpoint(&self) -> Vec<T> {
        let half = T::lit(0.5);
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| half * (*l + *u))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProblemWarning {
    /// Declared constants give `mu <= 0`; contraction is not guaranteed.
    NonPositiveMu(f64),
}

impl fmt::Display for ProblemWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemWarning::NonPositiveMu(mu) => {
                write!(f, "mu = {mu} <= 0: contraction not guaranteed")
            }
        }
    }
}

/// A stochastic optimal control problem
/// `dX = b(t,X,α)dt + σ(t,X)dW`, cost `E[∫φ(t,X,α)dt + ψ(X_T)]`.
///
/// All evaluation routines must be pure; they are called concurrently.
#[derive(Clone)]
pub struct ProblemSpec<T: Real> {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    pub horizon: T,
    pub initial_state: Vec<T>,
    pub action_box: ActionBox<T>,
    /// Analytic constants attached by built-ins (or by the user).
    pub declared: Option<ConstantsLedger<T>>,
    pub warnings: Vec<ProblemWarning>,
    drift: StateActionFn<T>,
    diffusion: DiffusionFn<T>,
    running_cost: RunningCostFn<T>,
    terminal_cost: TerminalCostFn<T>,
    drift_jac_x: StateActionFn<T>,
    diffusion_jac_x: TimeFn<T>,
    running_cost_grad_x: StateActionFn<T>,
    terminal_cost_grad_x: TerminalGradFn<T>,
}

impl<T: Real> fmt::Debug for ProblemSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("noise_dim", &self.noise_dim)
            .field("horizon", &self.horizon)
            .field("initial_state", &self.initial_state)
            .field("action_box", &self.action_box)
            .field("declared", &self.declared)
            .field("warnings", &self.warnings)
            .finish_non_exhaustive()
    }
}

impl<T: Real> ProblemSpec<T> {
    /// Starts a problem with every routine identically zero, `x₀ = 0`,
    /// `T = 1` and `A = [-1, 1]^m`.
    pub fn builder(state_dim: usize, control_dim: usize, noise_dim: usize) -> ProblemBuilder<T> {
        ProblemBuilder::new(state_dim, control_dim, noise_dim)
    }

    #[inline]
    pub fn drift(&self, t: T, x: &[T], a: &[T], out: &mut [T]) {
        (self.drift)(t, x, a, out)
    }

    #[inline]
    pub fn diffusion(&self, t: T, x: &[T], out: &mut [T]) {
        (self.diffusion)(t, x, out)
    }

    #[inline]
    pub fn running_cost(&self, t: T, x: &[T], a: &[T]) -> T {
        (self.running_cost)(t, x, a)
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[T]) -> T {
        (self.terminal_cost)(x)
    }

    #[inline]
    pub fn drift_jac_x(&self, t: T, x: &[T], a: &[T], out: &mut [T]) {
        (self.drift_jac_x)(t, x, a, out)
    }

    #[inline]
    pub fn diffusion_jac_x(&self, t: T, out: &mut [T]) {
        (self.diffusion_jac_x)(t, out)
    }

    #[inline]
    pub fn running_cost_grad_x(&self, t: T, x: &[T], a: &[T], out: &mut [T]) {
        (self.running_cost_grad_x)(t, x, a, out)
    }

    #[inline]
    pub fn terminal_cost_grad_x(&self, x: &[T], out: &mut [T]) {
        (self.terminal_cost_grad_x)(x, out)
    }

    /// Number of entries of the `D_xσ` array (`n · n · d`).
    pub fn diffusion_jac_len(&self) -> usize {
        self.state_dim * self.state_dim * self.noise_dim
    }

    pub fn with_initial_state(mut self, x0: Vec<T>) -> Result<Self> {
        if x0.len() != self.state_dim {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {}",
                x0.len(),
                self.state_dim
            )));
        }
        self.initial_state = x0;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidParameter {
                key: "horizon".into(),
                reason: format!("need finite T > 0, got {horizon}"),
            });
        }
        self.horizon = horizon;
        if let Some(l) = self.declared.as_mut() {
            l.horizon = Some(horizon);
        }
        Ok(self)
    }

    /// True when the declared constants flag `mu <= 0`.
    pub fn contraction_not_guaranteed(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, ProblemWarning::NonPositiveMu(_)))
    }
}

pub struct ProblemBuilder<T: Real> {
    spec: ProblemSpec<T>,
}

impl<T: Real> ProblemBuilder<T> {
    fn new(n: usize, m: usize, d: usize) -> Self {
        let nd = n * n * d;
        let spec = ProblemSpec {
            name: "custom".into(),
            state_dim: n,
            control_dim: m,
            noise_dim: d,
            horizon: T::one(),
            initial_state: vec![T::zero(); n],
            action_box: ActionBox {
                lower: vec![-T::one(); m],
                upper: vec![T::one(); m],
            },
            declared: None,
            warnings: Vec::new(),
            drift: Arc::new(|_, _, _, out: &mut [T]| out.fill(T::zero())),
            diffusion: Arc::new(|_, _, out: &mut [T]| out.fill(T::zero())),
            running_cost: Arc::new(|_, _, _| T::zero()),
            terminal_cost: Arc::new(|_| T::zero()),
            drift_jac_x: Arc::new(|_, _, _, out: &mut [T]| out.fill(T::zero())),
            diffusion_jac_x: Arc::new(move |_, out: &mut [T]| out[..nd].fill(T::zero())),
            running_cost_grad_x: Arc::new(|_, _, _, out: &mut [T]| out.fill(T::zero())),
            terminal_cost_grad_x: Arc::new(|_, out: &mut [T]| out.fill(T::zero())),
        };
        Self { spec }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.spec.name = name.into();
        self
    }

    pub fn horizon(mut self, horizon: T) -> Self {
        self.spec.horizon = horizon;
        self
    }

    pub fn initial_state(mut self, x0: Vec<T>) -> Self {
        self.spec.initial_state = x0;
        self
    }

    pub fn action_box(mut self, b: ActionBox<T>) -> Self {
        self.spec.action_box = b;
        self
    }

    pub fn declared(mut self, ledger: ConstantsLedger<T>) -> Self {
        self.spec.declared = Some(ledger);
        self
    }

    pub fn drift(mut self, f: impl Fn(T, &[T], &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.spec.drift = Arc::new(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(T, &[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.spec.diffusion = Arc::new(f);
        self
    }

    pub fn running_cost(mut self, f: impl Fn(T, &[T], &[T]) -> T + Send + Sync + 'static) -> Self {
        self.spec.running_cost = Arc::new(f);
        self
    }

    pub fn terminal_cost(mut self, f: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        self.spec.terminal_cost = Arc::new(f);
        self
    }

    pub fn drift_jac_x(
        mut self,
        f: impl Fn(T, &[T], &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        self.spec.drift_jac_x = Arc::new(f);
        self
    }

    pub fn diffusion_jac_x(mut self, f: impl Fn(T, &mut [T]) + Send + Sync + 'static) -> Self {
        self.spec.diffusion_jac_x = Arc::new(f);
        self
    }

    pub fn running_cost_grad_x(
        mut self,
        f: impl Fn(T, &[T], &[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        self.spec.running_cost_grad_x = Arc::new(f);
        self
    }

    pub fn terminal_cost_grad_x(mut self, f: impl Fn(&[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.spec.terminal_cost_grad_x = Arc::new(f);
        self
    }

    pub fn build(mut self) -> Result<ProblemSpec<T>> {
        let s = &self.spec;
        if s.state_dim == 0 || s.control_dim == 0 || s.noise_dim == 0 {
            return Err(Error::Dimension("state, control and noise dimensions must be positive".into()));
        }
        if s.initial_state.len() != s.state_dim {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {}",
                s.initial_state.len(),
                s.state_dim
            )));
        }
        if !crate::scalar::all_finite(&s.initial_state) {
            return Err(Error::InvalidParameter {
                key: "x0".into(),
                reason: "non-finite initial state".into(),
            });
        }
        if !(s.horizon > T::zero()) || !s.horizon.is_finite() {
            return Err(Error::InvalidParameter {
                key: "horizon".into(),
                reason: format!("need finite T > 0, got {}", s.horizon),
            });
        }
        let b = ActionBox::new(s.action_box.lower.clone(), s.action_box.upper.clone())?;
        if b.dim() != s.control_dim {
            return Err(Error::Dimension(format!(
                "action box has dimension {}, expected {}",
                b.dim(),
                s.control_dim
            )));
        }
        if let Some(ledger) = &s.declared {
            if let Some(mu) = ledger.mu_value() {
                if !(mu > T::zero()) {
                    self.spec.warnings.push(ProblemWarning::NonPositiveMu(mu.as_f64()));
                }
            }
        }
        Ok(self.spec)
    }
}
