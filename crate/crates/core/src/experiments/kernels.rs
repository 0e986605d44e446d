//! Filter kernels: one [`FilterKernel`] implementation per (model family,
//! filter id) pair, plus the dispatch that runs a filter over a model and
//! converts the engine output into an ambient-coordinate [`RunOutput`].

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::DVector;

use crate::bridge::{
    build_guided_path_with, linearize, log_l_sum_with, sample_increments, BridgeGrid,
    NaturalDiffusionVariant, OuLadder, StatedepProposal,
};
use crate::engine::{pf_run, FilterKernel, ParticleCloud, PfConfig, StepDiag, StreamCtx};
use crate::error::{Error, Result};
use crate::geometry::{AffineChart, ConstraintGeometry};
use crate::proposals::{
    bootstrap_natural, extended_conjugate, gaussian_observation_conjugate, reduced_conjugate,
    NaturalOptimalCache,
};
use crate::streams::StreamRole;

use super::config::FilterId;
use super::models::{DiffusionModel, DiscreteModel, ModelBundle};

/// Guided paths captured for debugging, keyed by (time, particle).
pub type PathDump = Arc<Mutex<BTreeMap<(usize, usize), Vec<DVector<f64>>>>>;

/// How many particles the path dump follows.
pub const PATH_DUMP_PARTICLES: usize = 10;

fn with_time(err: Error, n: usize) -> Error {
    match err {
        Error::RankDeficient(msg) => Error::RankDeficient(format!("{msg} (time {n})")),
        Error::Conditioning(msg) => Error::Conditioning(format!("{msg} (time {n})")),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Discrete-time kernels
// ---------------------------------------------------------------------------

/// Natural-parameterization kernel for discrete models: bootstrap when
/// `optimal` is None, otherwise the conjugate optimal proposal.
pub struct DiscreteNaturalKernel<'a> {
    model: &'a DiscreteModel,
    ys: &'a [DVector<f64>],
    optimal: Option<NaturalOptimalCache>,
}

impl<'a> DiscreteNaturalKernel<'a> {
    pub fn bootstrap(model: &'a DiscreteModel, ys: &'a [DVector<f64>]) -> Result<Self> {
        if model.obs.delta <= 0.0 {
            return Err(Error::Unsupported("bootstrap filter requires delta > 0".into()));
        }
        Ok(Self { model, ys, optimal: None })
    }

    pub fn optimal(model: &'a DiscreteModel, ys: &'a [DVector<f64>]) -> Result<Self> {
        let cache = NaturalOptimalCache::new(&model.transition, &model.obs, 1)?;
        Ok(Self { model, ys, optimal: Some(cache) })
    }

    fn propagate(
        &self,
        n: usize,
        x_prev: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let y = &self.ys[n - 1];
        let mut rng = ctx.rng(StreamRole::Propose);
        match &self.optimal {
            None => bootstrap_natural(x_prev, &self.model.transition, &self.model.obs, n, y, &mut rng),
            Some(cache) => {
                let (post, logw) = cache.parts(&self.model.transition.mean(x_prev), y);
                Ok((post.sample(&mut rng)?, logw))
            }
        }
    }
}

impl FilterKernel for DiscreteNaturalKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.model.transition.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.model.x0, ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(n, prev, ctx)
    }

    fn ambient(&self, _n: usize, state: &Self::State) -> DVector<f64> {
        state.clone()
    }
}

/// Manifold kernel for discrete models: particles live in chart
/// coordinates (dimension d_x on the extended chart, d_x - d_y on the
/// reduced one) and propose from the closed-form conjugate Gaussian. The
/// chart precision is step-independent for constant A, so only the chart
/// base points vary along the run.
pub struct DiscreteManifoldKernel<'a> {
    model: &'a DiscreteModel,
    charts: Vec<AffineChart>,
    cache: crate::proposals::ManifoldConjugateCache,
    extended: bool,
}

impl<'a> DiscreteManifoldKernel<'a> {
    pub fn low_noise(model: &'a DiscreteModel, ys: &'a [DVector<f64>]) -> Result<Self> {
        if model.obs.delta <= 0.0 {
            return Err(Error::Unsupported("low-noise filter requires delta > 0".into()));
        }
        let geom = ConstraintGeometry::new(model.obs.a_at(1).clone())?;
        let charts: Vec<AffineChart> = ys
            .iter()
            .map(|y| geom.extended_chart(y, model.obs.delta))
            .collect::<Result<_>>()?;
        let split = charts[0].split_basis();
        let cache = crate::proposals::ManifoldConjugateCache::extended(
            &split.state_rows,
            &split.noise_rows,
            model.transition.cov(),
            model.obs.sigma(),
        )?;
        Ok(Self { model, charts, cache, extended: true })
    }

    pub fn degenerate(model: &'a DiscreteModel, ys: &'a [DVector<f64>]) -> Result<Self> {
        if model.obs.delta != 0.0 {
            return Err(Error::Invalid(
                "degenerate filter targets the delta = 0 model; got delta > 0".into(),
            ));
        }
        let geom = ConstraintGeometry::new(model.obs.a_at(1).clone())?;
        let charts: Vec<AffineChart> =
            ys.iter().map(|y| geom.reduced_chart(y)).collect::<Result<_>>()?;
        let cache = crate::proposals::ManifoldConjugateCache::reduced(
            geom.kernel_basis(),
            model.transition.cov(),
        )?;
        Ok(Self { model, charts, cache, extended: false })
    }

    fn propagate(
        &self,
        n: usize,
        x_prev: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let chart = &self.charts[n - 1];
        let x_star = if self.extended {
            chart.base_point().rows(0, chart.d_x()).into_owned()
        } else {
            chart.base_point().clone()
        };
        let (mu, _m, logw) = self.cache.conjugate(&self.model.transition.mean(x_prev), &x_star);
        let mut rng = ctx.rng(StreamRole::Propose);
        let eta = crate::linalg::standard_normal_vector(mu.len(), &mut rng);
        let z = &mu + self.cache.precision().inv_factor_t_solve(&eta).map_err(|e| with_time(e, n))?;
        Ok((z, logw))
    }
}

impl FilterKernel for DiscreteManifoldKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.model.transition.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.model.x0, ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        let x_prev = self.charts[n - 2].map_state(prev)?;
        self.propagate(n, &x_prev, ctx)
    }

    fn ambient(&self, n: usize, state: &Self::State) -> DVector<f64> {
        self.charts[n - 1].map_state(state).expect("state dimension matches chart")
    }
}

// ---------------------------------------------------------------------------
// Diffusion kernels
// ---------------------------------------------------------------------------

/// Per-step bridge machinery shared by the diffusion kernels: linearize at
/// the previous particle, propose an endpoint, build the guided path, and
/// accumulate `sum_j L Xi` plus the state-dependent correction.
struct BridgeStep<'a> {
    model: &'a DiffusionModel,
    grid: BridgeGrid,
}

struct BridgeWeightParts {
    sum_l: f64,
    correction: f64,
    /// log f_tilde_frozen(x_new | x_prev) over the interval.
    frozen_log_density: f64,
}

impl<'a> BridgeStep<'a> {
    /// Everything after the endpoint has been proposed: dynamic auxiliary,
    /// Brownian block, guided path, L-sum, correction.
    #[allow(clippy::too_many_arguments)]
    fn weigh(
        &self,
        n: usize,
        aux_frozen: &crate::bridge::AuxiliaryOu,
        sprop: &StatedepProposal,
        x_prev: &DVector<f64>,
        x_new: &DVector<f64>,
        ctx: &StreamCtx,
        dump: Option<&PathDump>,
    ) -> Result<BridgeWeightParts> {
        let model = self.model;
        let (aux_dyn, correction) = if model.statedep {
            sprop
                .correction(&model.sde, aux_frozen, x_prev, x_new)
                .map_err(|e| with_time(e, n))?
        } else {
            (aux_frozen.clone(), 0.0)
        };
        let mut brng = ctx.rng(StreamRole::Brownian);
        let incr = sample_increments(&self.grid, model.sde.dim(), &mut brng);
        let ladder = OuLadder::new(&aux_dyn, &self.grid).map_err(|e| with_time(e, n))?;
        let path = build_guided_path_with(&model.sde, &ladder, x_prev, x_new, &incr)?;
        if let Some(dump) = dump {
            if (ctx.particle as usize) < PATH_DUMP_PARTICLES {
                let mut map = dump.lock().expect("path dump lock");
                map.insert((n, ctx.particle as usize), path.states.clone());
            }
        }
        let sum_l = log_l_sum_with(&model.sde, &aux_dyn, &ladder, &path);
        let frozen_log_density = sprop.frozen_endpoint.log_density(x_new, x_prev);
        Ok(BridgeWeightParts { sum_l, correction, frozen_log_density })
    }
}

/// Natural-parameterization bridge kernel (bootstrap / guided-optimal).
pub struct DiffusionNaturalKernel<'a> {
    model: &'a DiffusionModel,
    ys: &'a [DVector<f64>],
    bridge: BridgeStep<'a>,
    variant: NaturalDiffusionVariant,
    dump: Option<PathDump>,
}

impl<'a> DiffusionNaturalKernel<'a> {
    pub fn new(
        model: &'a DiffusionModel,
        ys: &'a [DVector<f64>],
        bridge_steps: usize,
        variant: NaturalDiffusionVariant,
        dump: Option<PathDump>,
    ) -> Result<Self> {
        if model.obs.delta <= 0.0 {
            return Err(Error::Unsupported(
                "natural-parameterization bridge filters require delta > 0".into(),
            ));
        }
        let grid = BridgeGrid::uniform(bridge_steps, 0.0, model.obs_spacing);
        Ok(Self { model, ys, bridge: BridgeStep { model, grid }, variant, dump })
    }

    fn propagate(
        &self,
        n: usize,
        x_prev: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let model = self.model;
        let y = &self.ys[n - 1];
        let aux_frozen = linearize(&model.sde, x_prev, model.obs_spacing, model.flow_substeps)
            .map_err(|e| with_time(e, n))?;
        let sprop =
            StatedepProposal::new(&aux_frozen, model.obs_spacing).map_err(|e| with_time(e, n))?;
        let mut prng = ctx.rng(StreamRole::Propose);
        let (x_new, base_logw) = match self.variant {
            NaturalDiffusionVariant::Bootstrap => {
                let x_new = sprop.frozen_endpoint.sample_endpoint(x_prev, &mut prng);
                let log_h = model.obs.obs_log_density(n, y, &x_new)?;
                (x_new, log_h)
            }
            NaturalDiffusionVariant::GuidedOptimal => {
                let (post, evidence) = gaussian_observation_conjugate(
                    &sprop.frozen_endpoint.mean(x_prev),
                    &sprop.frozen_endpoint.q,
                    model.obs.a_at(n),
                    model.obs.sigma(),
                    model.obs.delta,
                    y,
                )
                .map_err(|e| with_time(e, n))?;
                (post.sample(&mut prng)?, evidence)
            }
        };
        let parts =
            self.bridge.weigh(n, &aux_frozen, &sprop, x_prev, &x_new, ctx, self.dump.as_ref())?;
        // Bootstrap: w = h * exp{sum L} * (f_dyn / f_frozen); the frozen
        // proposal density cancels the f_tilde factor inside R^l.
        // Guided-optimal: the conjugate proposal leaves the evidence.
        Ok((x_new, base_logw + parts.sum_l + parts.correction))
    }
}

impl FilterKernel for DiffusionNaturalKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.model.sde.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.model.x0, ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(n, prev, ctx)
    }

    fn ambient(&self, _n: usize, state: &Self::State) -> DVector<f64> {
        state.clone()
    }
}

/// Manifold bridge kernel (low-noise / degenerate): the endpoint is
/// proposed in chart coordinates from the conjugate of the frozen
/// auxiliary endpoint density (restricted to the chart, times the noise
/// density on the extended chart), and the weight composes `exp{sum L Xi}`
/// with the dynamic endpoint density, the noise density, and the proposal.
pub struct DiffusionManifoldKernel<'a> {
    model: &'a DiffusionModel,
    bridge: BridgeStep<'a>,
    charts: Vec<AffineChart>,
    extended: bool,
    dump: Option<PathDump>,
}

impl<'a> DiffusionManifoldKernel<'a> {
    pub fn new(
        model: &'a DiffusionModel,
        ys: &'a [DVector<f64>],
        bridge_steps: usize,
        extended: bool,
        dump: Option<PathDump>,
    ) -> Result<Self> {
        if extended && model.obs.delta <= 0.0 {
            return Err(Error::Unsupported("low-noise bridge filter requires delta > 0".into()));
        }
        if !extended && model.obs.delta != 0.0 {
            return Err(Error::Invalid(
                "degenerate bridge filter targets the delta = 0 model".into(),
            ));
        }
        let geom = ConstraintGeometry::new(model.obs.a_at(1).clone())?;
        let charts: Vec<AffineChart> = ys
            .iter()
            .map(|y| {
                if extended {
                    geom.extended_chart(y, model.obs.delta)
                } else {
                    geom.reduced_chart(y)
                }
            })
            .collect::<Result<_>>()?;
        let grid = BridgeGrid::uniform(bridge_steps, 0.0, model.obs_spacing);
        Ok(Self { model, bridge: BridgeStep { model, grid }, charts, extended, dump })
    }

    fn propagate(
        &self,
        n: usize,
        x_prev: &DVector<f64>,
        ctx: &StreamCtx,
    ) -> Result<(DVector<f64>, f64)> {
        let model = self.model;
        let chart = &self.charts[n - 1];
        let aux_frozen = linearize(&model.sde, x_prev, model.obs_spacing, model.flow_substeps)
            .map_err(|e| with_time(e, n))?;
        let sprop =
            StatedepProposal::new(&aux_frozen, model.obs_spacing).map_err(|e| with_time(e, n))?;
        let frozen = &sprop.frozen_endpoint;
        let pred_mean = frozen.mean(x_prev);
        let mut prng = ctx.rng(StreamRole::Propose);
        let (z_new, log_q, noise_term) = if self.extended {
            let (params, _) = extended_conjugate(chart, &pred_mean, &frozen.q, model.obs.sigma())
                .map_err(|e| with_time(e, n))?;
            let z = params.sample(&mut prng)?;
            let log_q = params.log_density(&z);
            let eps = chart.map_noise(&z)?;
            (z, log_q, model.obs.noise_log_density(&eps))
        } else {
            let (params, _) = reduced_conjugate(chart, &pred_mean, &frozen.q)
                .map_err(|e| with_time(e, n))?;
            let z = params.sample(&mut prng)?;
            let log_q = params.log_density(&z);
            (z, log_q, 0.0)
        };
        let x_new = chart.map_state(&z_new)?;
        let parts =
            self.bridge.weigh(n, &aux_frozen, &sprop, x_prev, &x_new, ctx, self.dump.as_ref())?;
        // w = exp{sum L} f_dyn(x_new | x_prev) [p(eps)] / q(z_new), with
        // f_dyn = f_frozen * exp(correction).
        let logw =
            parts.sum_l + parts.frozen_log_density + parts.correction + noise_term - log_q;
        Ok((z_new, logw))
    }
}

impl FilterKernel for DiffusionManifoldKernel<'_> {
    type State = DVector<f64>;

    fn dim(&self) -> usize {
        self.model.sde.dim()
    }

    fn init(&self, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        self.propagate(1, &self.model.x0, ctx)
    }

    fn step(&self, n: usize, prev: &Self::State, ctx: &StreamCtx) -> Result<(Self::State, f64)> {
        let x_prev = self.charts[n - 2].map_state(prev)?;
        self.propagate(n, &x_prev, ctx)
    }

    fn ambient(&self, n: usize, state: &Self::State) -> DVector<f64> {
        self.charts[n - 1].map_state(state).expect("state dimension matches chart")
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Weighted particle values of selected components at one time.
#[derive(Clone, Debug)]
pub struct MarginalCloud {
    pub time: usize,
    /// 1-based component indices.
    pub components: Vec<usize>,
    /// values[k][i]: component k of particle i in ambient coordinates.
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Ambient-coordinate filter output, independent of the kernel's state
/// type.
pub struct RunOutput {
    pub diags: Vec<StepDiag>,
    pub means: Vec<DVector<f64>>,
    pub vars: Vec<DVector<f64>>,
    pub log_evidence: f64,
    pub collapsed_at: Option<usize>,
    pub marginals: Vec<MarginalCloud>,
    pub paths: Option<BTreeMap<(usize, usize), Vec<DVector<f64>>>>,
}

impl RunOutput {
    pub fn median_ess(&self) -> f64 {
        let mut v: Vec<f64> = self.diags.iter().map(|d| d.ess).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }
}

fn marginal_clouds<K: FilterKernel>(
    kernel: &K,
    clouds: &[ParticleCloud<K::State>],
    components: &[usize],
) -> Vec<MarginalCloud> {
    clouds
        .iter()
        .map(|cloud| {
            let weights: Vec<f64> = cloud.log_weights.iter().map(|l| l.exp()).collect();
            let ambient: Vec<DVector<f64>> =
                cloud.states.iter().map(|s| kernel.ambient(cloud.time_index, s)).collect();
            let values = components
                .iter()
                .map(|&c| ambient.iter().map(|x| x[c - 1]).collect())
                .collect();
            MarginalCloud {
                time: cloud.time_index,
                components: components.to_vec(),
                values,
                weights,
            }
        })
        .collect()
}

fn finish<K: FilterKernel>(
    kernel: &K,
    cfg: &PfConfig,
    keep_times: &[usize],
    components: &[usize],
    dump: Option<PathDump>,
) -> Result<RunOutput> {
    let out = pf_run(kernel, cfg, keep_times)?;
    let marginals = marginal_clouds(kernel, &out.clouds, components);
    let paths = dump.map(|d| {
        Arc::try_unwrap(d)
            .map(|m| m.into_inner().expect("path dump lock"))
            .unwrap_or_else(|arc| arc.lock().expect("path dump lock").clone())
    });
    Ok(RunOutput {
        diags: out.diags,
        means: out.means,
        vars: out.vars,
        log_evidence: out.log_evidence,
        collapsed_at: out.collapsed_at,
        marginals,
        paths,
    })
}

/// Run one filter over one model and data set.
#[allow(clippy::too_many_arguments)]
pub fn run_filter(
    model: &ModelBundle,
    ys: &[DVector<f64>],
    filter: FilterId,
    cfg: &PfConfig,
    bridge_steps: usize,
    keep_times: &[usize],
    components: &[usize],
    dump_paths: bool,
) -> Result<RunOutput> {
    match model {
        ModelBundle::Discrete(m) => match filter {
            FilterId::Bootstrap => {
                let k = DiscreteNaturalKernel::bootstrap(m, ys)?;
                finish(&k, cfg, keep_times, components, None)
            }
            FilterId::OptimalNatural => {
                let k = DiscreteNaturalKernel::optimal(m, ys)?;
                finish(&k, cfg, keep_times, components, None)
            }
            FilterId::LowNoise => {
                let k = DiscreteManifoldKernel::low_noise(m, ys)?;
                finish(&k, cfg, keep_times, components, None)
            }
            FilterId::Degenerate => {
                let k = DiscreteManifoldKernel::degenerate(m, ys)?;
                finish(&k, cfg, keep_times, components, None)
            }
        },
        ModelBundle::Diffusion(m) => {
            let dump: Option<PathDump> =
                dump_paths.then(|| Arc::new(Mutex::new(BTreeMap::new())));
            match filter {
                FilterId::Bootstrap => {
                    let k = DiffusionNaturalKernel::new(
                        m,
                        ys,
                        bridge_steps,
                        NaturalDiffusionVariant::Bootstrap,
                        dump.clone(),
                    )?;
                    finish(&k, cfg, keep_times, components, dump)
                }
                FilterId::OptimalNatural => {
                    let k = DiffusionNaturalKernel::new(
                        m,
                        ys,
                        bridge_steps,
                        NaturalDiffusionVariant::GuidedOptimal,
                        dump.clone(),
                    )?;
                    finish(&k, cfg, keep_times, components, dump)
                }
                FilterId::LowNoise => {
                    let k = DiffusionManifoldKernel::new(m, ys, bridge_steps, true, dump.clone())?;
                    finish(&k, cfg, keep_times, components, dump)
                }
                FilterId::Degenerate => {
                    let k = DiffusionManifoldKernel::new(m, ys, bridge_steps, false, dump.clone())?;
                    finish(&k, cfg, keep_times, components, dump)
                }
            }
        }
    }
}
