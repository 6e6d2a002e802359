//! Two-phase PARAFAC alternating least squares.
//!
//! Phase 1 fits every receive-morph tensor `X_i ≈ [[Āx_i, Āz_i, B]]` with
//! private receive factors and one transmit factor `B` shared by all slots.
//! Phase 2 fits every transmit-morph tensor `X_j ≈ [[A, B̄x_j, B̄z_j]]` with a
//! shared receive factor `A`. Each outer iteration runs the per-slot updates
//! of a phase and then refits its shared factor against the concatenated
//! unfoldings of all slots.
//!
//! Path gains stay absorbed in the factors during the iterations and are
//! fitted afterwards against a static reference observation.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::complex_gaussian;
use crate::tensor::{khatri_rao, ls_solve, ls_solve_left, pinv, svd, Tensor3};
use crate::training::TrainingFrame;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Relative residual below which a fit is treated as exact.
const RESIDUAL_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    pub max_outer_iterations: usize,
    /// Stop once the relative change of the total residual drops below this.
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Record the phase residual after every LS substep.
    pub trace_substeps: bool,
    /// Start the first restart from the algebraic initializer instead of
    /// random factors.
    pub algebraic_start: bool,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 200,
            tolerance: 1e-8,
            restarts: 3,
            seed: 0,
            trace_substeps: false,
            algebraic_start: true,
        }
    }
}

impl AlsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 {
            return Err(Error::InvalidConfig("max_outer_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which half of the training protocol a tensor set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Receiver morphs; tensors are `N_x × N_z × M`.
    ReceiverMorph,
    /// Transmitter morphs; tensors are `N × M_x × M_z`.
    TransmitterMorph,
}

impl Phase {
    /// Mode (1-based) holding the factor shared by all slots of the phase.
    pub fn shared_mode(self) -> usize {
        match self {
            Phase::ReceiverMorph => 3,
            Phase::TransmitterMorph => 1,
        }
    }

    /// Per-slot modes in update order.
    pub fn private_modes(self) -> [usize; 2] {
        match self {
            Phase::ReceiverMorph => [1, 2],
            Phase::TransmitterMorph => [2, 3],
        }
    }
}

/// Element counts of both surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayDims {
    pub rx_nx: usize,
    pub rx_nz: usize,
    pub tx_nx: usize,
    pub tx_nz: usize,
}

impl ArrayDims {
    /// Tensor dimensions of the given phase.
    pub fn tensor_dims(&self, phase: Phase) -> [usize; 3] {
        match phase {
            Phase::ReceiverMorph => [self.rx_nx, self.rx_nz, self.tx_nx * self.tx_nz],
            Phase::TransmitterMorph => [self.rx_nx * self.rx_nz, self.tx_nx, self.tx_nz],
        }
    }
}

/// Sum-of-ranks uniqueness condition for one phase, evaluated literally:
/// `min(d1, L) + min(d2, L) + min(d3, L) >= 2L + 2`. Note that it fails for
/// `L = 1`, where a rank-one fit is unique up to scale anyway.
pub fn kruskal_check(phase: Phase, dims: &ArrayDims, rank: usize) -> bool {
    let d = dims.tensor_dims(phase);
    d.iter().map(|&x| x.min(rank)).sum::<usize>() >= 2 * rank + 2
}

/// Cached unfoldings of all tensors of one phase.
#[derive(Debug, Clone)]
pub struct PhaseData {
    phase: Phase,
    dims: [usize; 3],
    unfoldings: Vec<[CMatrix; 3]>,
    energy: f64,
}

impl PhaseData {
    pub fn new(phase: Phase, tensors: &[Tensor3]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidConfig("phase has no tensors".into()))?;
        let dims = first.dims();
        let mut unfoldings = Vec::with_capacity(tensors.len());
        for t in tensors {
            if t.dims() != dims {
                return Err(Error::mismatch("phase tensor dims", format!("{dims:?}"), format!("{:?}", t.dims())));
            }
            unfoldings.push([t.unfold(1)?, t.unfold(2)?, t.unfold(3)?]);
        }
        let energy = tensors.iter().map(Tensor3::norm_squared).sum();
        Ok(Self {
            phase,
            dims,
            unfoldings,
            energy,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slots(&self) -> usize {
        self.unfoldings.len()
    }

    /// Total squared Frobenius norm of the phase's tensors.
    pub fn energy(&self) -> f64 {
        self.energy
    }
}

/// Factors of one phase: the shared factor and two private factors per slot.
///
/// For [`Phase::ReceiverMorph`], `shared = B` and `private[i] = [Āx_i, Āz_i]`;
/// for [`Phase::TransmitterMorph`], `shared = A` and `private[j] = [B̄x_j, B̄z_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFactors {
    pub shared: CMatrix,
    pub private: Vec<[CMatrix; 2]>,
}

impl PhaseFactors {
    pub fn rank(&self) -> usize {
        self.shared.ncols()
    }

    /// Factors of slot `s` in mode order `[F1, F2, F3]`.
    fn slot_factors(&self, phase: Phase, s: usize) -> [&CMatrix; 3] {
        let [p, q] = &self.private[s];
        match phase {
            Phase::ReceiverMorph => [p, q, &self.shared],
            Phase::TransmitterMorph => [&self.shared, p, q],
        }
    }

    fn validate(&self, data: &PhaseData) -> Result<()> {
        if self.private.len() != data.slots() {
            return Err(Error::mismatch("slot factor count", data.slots(), self.private.len()));
        }
        let l = self.rank();
        for s in 0..data.slots() {
            let f = self.slot_factors(data.phase, s);
            for (m, fm) in f.iter().enumerate() {
                if fm.shape() != (data.dims[m], l) {
                    return Err(Error::mismatch(
                        "factor shape",
                        format!("{}x{l}", data.dims[m]),
                        format!("{}x{}", fm.nrows(), fm.ncols()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `khatri_rao` of the two factors other than `mode`, transposed, so that
/// `unfold(mode) ≈ F_mode · coefficient`.
fn coefficient(f: [&CMatrix; 3], mode: usize) -> CMatrix {
    let kr = match mode {
        1 => khatri_rao(f[2], f[1]),
        2 => khatri_rao(f[2], f[0]),
        _ => khatri_rao(f[1], f[0]),
    };
    kr.expect("factor column counts checked").transpose()
}

fn slot_residual(data: &PhaseData, factors: &PhaseFactors, s: usize) -> f64 {
    let f = factors.slot_factors(data.phase, s);
    (&data.unfoldings[s][0] - f[0] * coefficient(f, 1)).norm_squared()
}

/// Sum of squared residuals over all slots of the phase.
pub fn phase_residual(data: &PhaseData, factors: &PhaseFactors) -> f64 {
    (0..data.slots()).map(|s| slot_residual(data, factors, s)).sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// Phase residual after the update.
    pub residual: f64,
    /// Phase residual before the update and after every substep, when traced.
    pub substeps: Vec<f64>,
    /// LS solves that truncated singular values.
    pub rank_warnings: usize,
}

/// One sweep over a phase: per-slot updates of both private factors, then a
/// single aggregated refit of the shared factor.
pub fn phase_update(data: &PhaseData, factors: &mut PhaseFactors, trace: bool) -> Result<UpdateReport> {
    factors.validate(data)?;
    let phase = data.phase;
    let mut report = UpdateReport::default();
    let mut slot_res: Vec<f64> = if trace {
        (0..data.slots()).map(|s| slot_residual(data, factors, s)).collect()
    } else {
        Vec::new()
    };
    if trace {
        report.substeps.push(slot_res.iter().sum());
    }

    for s in 0..data.slots() {
        for (k, &mode) in phase.private_modes().iter().enumerate() {
            let coeff = coefficient(factors.slot_factors(phase, s), mode);
            let sol = ls_solve(&coeff, &data.unfoldings[s][mode - 1])?;
            report.rank_warnings += usize::from(sol.rank_deficient);
            factors.private[s][k] = sol.x;
            if trace {
                slot_res[s] = slot_residual(data, factors, s);
                report.substeps.push(slot_res.iter().sum());
            }
        }
    }

    let mode = phase.shared_mode();
    let coeffs: Vec<CMatrix> = (0..data.slots())
        .map(|s| coefficient(factors.slot_factors(phase, s), mode))
        .collect();
    let rhs: Vec<&CMatrix> = data.unfoldings.iter().map(|u| &u[mode - 1]).collect();
    let sol = ls_solve(&hstack(&coeffs.iter().collect::<Vec<_>>()), &hstack(&rhs))?;
    report.rank_warnings += usize::from(sol.rank_deficient);
    factors.shared = sol.x;

    report.residual = phase_residual(data, factors);
    if trace {
        report.substeps.push(report.residual);
    }
    Ok(report)
}

/// Receiver-morph phase sweep: updates `Āx_i`, `Āz_i` for every slot, then `B`.
pub fn phase1_update(data: &PhaseData, factors: &mut PhaseFactors, trace: bool) -> Result<UpdateReport> {
    debug_assert_eq!(data.phase, Phase::ReceiverMorph);
    phase_update(data, factors, trace)
}

/// Transmitter-morph phase sweep: updates `B̄x_j`, `B̄z_j` for every slot, then `A`.
pub fn phase2_update(data: &PhaseData, factors: &mut PhaseFactors, trace: bool) -> Result<UpdateReport> {
    debug_assert_eq!(data.phase, Phase::TransmitterMorph);
    phase_update(data, factors, trace)
}

fn hstack(blocks: &[&CMatrix]) -> CMatrix {
    let rows = blocks[0].nrows();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(*b);
        c += b.ncols();
    }
    out
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, 1.0))
}

/// Random start: the shared factor and the second private factor of each
/// slot (the first private factor is solved before it is ever read).
fn init_factors<R: Rng + ?Sized>(data: &PhaseData, rank: usize, rng: &mut R) -> PhaseFactors {
    let d = data.dims;
    let [p, q] = data.phase.private_modes();
    let shared = random_matrix(rng, d[data.phase.shared_mode() - 1], rank);
    let private = (0..data.slots())
        .map(|_| [CMatrix::zeros(d[p - 1], rank), random_matrix(rng, d[q - 1], rank)])
        .collect();
    PhaseFactors { shared, private }
}

/// Data-driven start for one phase.
///
/// The shared factor spans the dominant `L`-dimensional left subspace of the
/// stacked shared-mode unfoldings, `F_s = U·T`. Compressing slot `i` by `U^H`
/// leaves `T · khatri_rao(F_q, F_p)^T`; contracting its `p` mode with two
/// vectors gives `S_k = T·diag(w_k^T F_p)·F_q^T`, so `S_1 S_2^†` has the
/// columns of `T` as eigenvectors in every slot. A random combination over
/// slots is diagonalized once.
///
/// Returns `None` when the dimensions do not admit the construction.
fn algebraic_init<R: Rng + ?Sized>(data: &PhaseData, rank: usize, rng: &mut R) -> Option<PhaseFactors> {
    let d = data.dims;
    let phase = data.phase;
    let s = phase.shared_mode();
    let [p, q] = phase.private_modes();
    let (dp, dq) = (d[p - 1], d[q - 1]);
    if d[s - 1] < rank || dp.max(dq) < rank {
        return None;
    }
    let stacked = hstack(&data.unfoldings.iter().map(|u| &u[s - 1]).collect::<Vec<_>>());
    let basis = svd(&stacked).ok()?.u.columns(0, rank).into_owned();

    // contract over the private mode whose partner can carry the pseudo-inverse
    let contract_first = dq >= rank;
    let mut pencil = CMatrix::zeros(rank, rank);
    let w1 = random_matrix(rng, dp.max(dq), 1);
    let w2 = random_matrix(rng, dp.max(dq), 1);
    for unf in &data.unfoldings {
        let compressed = basis.adjoint() * &unf[s - 1];
        // column index of `compressed` is ip + iq * dp
        let slice = |w: &CMatrix| -> CMatrix {
            if contract_first {
                CMatrix::from_fn(rank, dq, |r, iq| (0..dp).map(|ip| w[ip] * compressed[(r, ip + iq * dp)]).sum())
            } else {
                CMatrix::from_fn(rank, dp, |r, ip| (0..dq).map(|iq| w[iq] * compressed[(r, ip + iq * dp)]).sum())
            }
        };
        let (s1, s2) = (slice(&w1), slice(&w2));
        pencil += (s1 * pinv(&s2).ok()?.0) * complex_gaussian(rng, 1.0);
    }
    let schur = nalgebra::Schur::try_new(pencil.clone(), f64::EPSILON, 10_000)?;
    let (_, tri) = schur.unpack();
    let mut rotation = CMatrix::zeros(rank, rank);
    for l in 0..rank {
        let shifted = &pencil - CMatrix::identity(rank, rank) * tri[(l, l)];
        // null direction: right singular vector of the smallest singular value
        rotation.set_column(l, &svd(&shifted).ok()?.v.column(rank - 1));
    }
    let shared = basis * rotation;
    // with the shared factor fixed, row l of pinv(F_s)·X_(s) is vec(f_p,l f_q,l^T)
    let (shared_pinv, _) = pinv(&shared).ok()?;
    let mut private = Vec::with_capacity(data.slots());
    for unf in &data.unfoldings {
        let rows = &shared_pinv * &unf[s - 1];
        let mut fp = CMatrix::zeros(dp, rank);
        let mut fq = CMatrix::zeros(dq, rank);
        for l in 0..rank {
            let slab = CMatrix::from_fn(dp, dq, |ip, iq| rows[(l, ip + iq * dp)]);
            let dec = svd(&slab).ok()?;
            fp.set_column(l, &(dec.u.column(0) * C64::from(dec.singular_values[0])));
            fq.set_column(l, &dec.v.column(0).map(|x| x.conj()));
        }
        private.push([fp, fq]);
    }
    Some(PhaseFactors { shared, private })
}

/// Phase residual traces of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub phase1: Vec<f64>,
    pub phase2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Receive steering matrix of the static receiver, `N × L`.
    pub a_hat: CMatrix,
    /// Transmit steering matrix of the static transmitter, `M × L`, columns
    /// paired with those of `a_hat`.
    pub b_hat: CMatrix,
    /// Phase-1 factors `[Āx_i, Āz_i]` per slot.
    pub rx_factors: Vec<[CMatrix; 2]>,
    /// Phase-2 factors `[B̄x_j, B̄z_j]` per slot.
    pub tx_factors: Vec<[CMatrix; 2]>,
    pub alpha_hat: CVector,
    /// Total residual over all `I + J` tensors after each outer iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub restart: usize,
    /// Outer iterations whose total residual exceeded the previous one.
    pub outer_increases: usize,
    pub rank_warnings: usize,
    /// Per-iteration substep traces, when requested.
    pub traces: Vec<IterationTrace>,
}

impl EstimationResult {
    pub fn channel(&self) -> CMatrix {
        reconstruct_channel(&self.a_hat, &self.b_hat, &self.alpha_hat)
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

struct RunState {
    phase1: PhaseFactors,
    phase2: PhaseFactors,
    history: Vec<f64>,
    traces: Vec<IterationTrace>,
    converged: bool,
    outer_increases: usize,
    rank_warnings: usize,
}

fn run_single(
    p1: &PhaseData,
    p2: &PhaseData,
    rank: usize,
    opts: &AlsOptions,
    algebraic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<RunState> {
    let (phase1, phase2) = if algebraic {
        (
            algebraic_init(p1, rank, rng).unwrap_or_else(|| init_factors(p1, rank, rng)),
            algebraic_init(p2, rank, rng).unwrap_or_else(|| init_factors(p2, rank, rng)),
        )
    } else {
        (init_factors(p1, rank, rng), init_factors(p2, rank, rng))
    };
    let mut state = RunState {
        phase1,
        phase2,
        history: Vec::new(),
        traces: Vec::new(),
        converged: false,
        outer_increases: 0,
        rank_warnings: 0,
    };
    let energy = p1.energy() + p2.energy();
    for _ in 0..opts.max_outer_iterations {
        let r1 = phase1_update(p1, &mut state.phase1, opts.trace_substeps)?;
        let r2 = phase2_update(p2, &mut state.phase2, opts.trace_substeps)?;
        state.rank_warnings += r1.rank_warnings + r2.rank_warnings;
        let total = r1.residual + r2.residual;
        if opts.trace_substeps {
            state.traces.push(IterationTrace {
                phase1: r1.substeps,
                phase2: r2.substeps,
            });
        }
        let prev = state.history.last().copied();
        state.history.push(total);
        if total <= RESIDUAL_FLOOR * energy {
            state.converged = true;
            break;
        }
        if let Some(prev) = prev {
            if total > prev {
                state.outer_increases += 1;
                debug!("outer residual increased from {prev:e} to {total:e}");
            }
            if (prev - total).abs() <= opts.tolerance * prev {
                state.converged = true;
                break;
            }
        }
    }
    Ok(state)
}

/// Runs the two-phase ALS on a training frame and fits the path gains.
pub fn run_two_phase_als(frame: &TrainingFrame, rank: usize, opts: &AlsOptions) -> Result<EstimationResult> {
    opts.validate()?;
    frame.validate()?;
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    let p1 = PhaseData::new(Phase::ReceiverMorph, &frame.phase1)?;
    let p2 = PhaseData::new(Phase::TransmitterMorph, &frame.phase2)?;
    let [rx_nx, rx_nz, _] = p1.dims();
    let [_, tx_nx, tx_nz] = p2.dims();
    let dims = ArrayDims {
        rx_nx,
        rx_nz,
        tx_nx,
        tx_nz,
    };
    for phase in [Phase::ReceiverMorph, Phase::TransmitterMorph] {
        if !kruskal_check(phase, &dims, rank) {
            warn!("{phase:?}: uniqueness condition fails for L={rank} at dims {:?}", dims.tensor_dims(phase));
        }
    }

    let energy = p1.energy() + p2.energy();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, RunState)> = None;
    for restart in 0..opts.restarts {
        let algebraic = opts.algebraic_start && restart == 0;
        let state = run_single(&p1, &p2, rank, opts, algebraic, &mut rng)?;
        let residual = *state.history.last().expect("at least one iteration");
        let exact = residual <= RESIDUAL_FLOOR * energy;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| residual < *b.history.last().unwrap());
        if better {
            best = Some((restart, state));
        }
        if exact {
            break;
        }
    }
    let (restart, state) = best.expect("at least one restart");
    if !state.converged {
        debug!("ALS hit the iteration limit without converging");
    }

    let a_hat = state.phase2.shared;
    let b_raw = state.phase1.shared;
    let fit = estimate_gains(&a_hat, &b_raw, &frame.reference)?;
    let b_hat = permute_columns(&b_raw, &fit.pairing);
    Ok(EstimationResult {
        a_hat,
        b_hat,
        rx_factors: state.phase1.private,
        tx_factors: state.phase2.private,
        alpha_hat: fit.alpha,
        iterations: state.history.len(),
        residual_history: state.history,
        converged: state.converged,
        restart,
        outer_increases: state.outer_increases,
        rank_warnings: state.rank_warnings + usize::from(fit.rank_deficient),
        traces: state.traces,
    })
}

fn permute_columns(m: &CMatrix, order: &[usize]) -> CMatrix {
    CMatrix::from_columns(&order.iter().map(|&c| m.column(c)).collect::<Vec<_>>())
}

fn normalize_columns(m: &CMatrix) -> CMatrix {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= C64::new(n, 0.0);
        }
    }
    out
}

/// Greedy one-to-one assignment maximizing `score[(row, col)]`. Returns the
/// column assigned to each row.
fn greedy_assignment(score: &nalgebra::DMatrix<f64>) -> Vec<usize> {
    let (rows, cols) = score.shape();
    let mut assigned = vec![usize::MAX; rows];
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    for _ in 0..rows.min(cols) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for r in (0..rows).filter(|&r| !row_used[r]) {
            for c in (0..cols).filter(|&c| !col_used[c]) {
                if score[(r, c)] > best.0 {
                    best = (score[(r, c)], r, c);
                }
            }
        }
        let (_, r, c) = best;
        row_used[r] = true;
        col_used[c] = true;
        assigned[r] = c;
    }
    assigned
}

#[derive(Debug, Clone)]
pub struct GainFit {
    pub alpha: CVector,
    /// `pairing[l]` is the column of `B̂` that belongs with column `l` of `Â`.
    pub pairing: Vec<usize>,
    pub rank_deficient: bool,
}

impl GainFit {
    /// Channel implied by the fit, with `b_hat` in its original column order.
    pub fn channel(&self, a_hat: &CMatrix, b_hat: &CMatrix) -> CMatrix {
        reconstruct_channel(a_hat, &permute_columns(b_hat, &self.pairing), &self.alpha)
    }
}

/// Fits path gains `α̂ = (B̂ ⋄ Â)^† vec(X_ref)`.
///
/// The two phases recover their factors with independent column orders, so
/// the columns of `B̂` are first paired with those of `Â` through the
/// coupling matrix `Â^† X_ref (B̂^T)^†`, which is a scaled permutation for
/// exact factors.
pub fn estimate_gains(a_hat: &CMatrix, b_hat: &CMatrix, reference: &CMatrix) -> Result<GainFit> {
    let l = a_hat.ncols();
    if b_hat.ncols() != l {
        return Err(Error::mismatch("gain fit rank", l, b_hat.ncols()));
    }
    if reference.shape() != (a_hat.nrows(), b_hat.nrows()) {
        return Err(Error::mismatch(
            "reference observation",
            format!("{}x{}", a_hat.nrows(), b_hat.nrows()),
            format!("{}x{}", reference.nrows(), reference.ncols()),
        ));
    }
    let pairing = if l == 1 {
        vec![0]
    } else {
        let an = normalize_columns(a_hat);
        let bn = normalize_columns(b_hat);
        let coupling = pinv(&an)?.0 * reference * pinv(&bn.transpose())?.0;
        greedy_assignment(&coupling.map(|z| z.norm()))
    };
    let b_paired = permute_columns(b_hat, &pairing);
    let design = khatri_rao(&b_paired, a_hat)?;
    let vec_ref = CMatrix::from_column_slice(reference.len(), 1, reference.as_slice());
    let sol = ls_solve_left(&design, &vec_ref)?;
    if sol.rank_deficient {
        warn!("gain fit design is rank deficient (rank {} < {l})", sol.rank);
    }
    Ok(GainFit {
        alpha: CVector::from_column_slice(sol.x.as_slice()),
        pairing,
        rank_deficient: sol.rank_deficient,
    })
}

/// `Â · diag(α̂) · B̂^T`.
pub fn reconstruct_channel(a_hat: &CMatrix, b_hat: &CMatrix, alpha_hat: &CVector) -> CMatrix {
    let mut scaled = a_hat.clone();
    for (mut col, g) in scaled.column_iter_mut().zip(alpha_hat.iter()) {
        col *= *g;
    }
    scaled * b_hat.transpose()
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: CMatrix,
    /// `permutation[l]` is the estimated column matched to reference column `l`.
    pub permutation: Vec<usize>,
    pub scalings: CVector,
    /// Two reference columns had the same best-matching estimated column.
    pub ambiguous: bool,
}

/// Removes the column permutation and complex scaling ambiguity of a factor
/// estimate relative to a reference.
pub fn align_factors(estimate: &CMatrix, reference: &CMatrix) -> Result<Alignment> {
    if estimate.shape() != reference.shape() {
        return Err(Error::mismatch(
            "align_factors",
            format!("{}x{}", reference.nrows(), reference.ncols()),
            format!("{}x{}", estimate.nrows(), estimate.ncols()),
        ));
    }
    let corr = (normalize_columns(reference).adjoint() * normalize_columns(estimate)).map(|z| z.norm());
    let permutation = greedy_assignment(&corr);

    let best_match: Vec<usize> = corr
        .row_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b }).0)
        .collect();
    let ambiguous = best_match
        .iter()
        .enumerate()
        .any(|(i, m)| best_match[i + 1..].contains(m));
    if ambiguous {
        debug!("alignment: two reference columns share a best match (near-collinear columns)");
    }

    let mut aligned = CMatrix::zeros(estimate.nrows(), estimate.ncols());
    let mut scalings = CVector::zeros(estimate.ncols());
    for (l, &p) in permutation.iter().enumerate() {
        let est = estimate.column(p);
        let denom = est.norm_squared();
        let c = if denom > 0.0 {
            est.dotc(&reference.column(l)) / denom
        } else {
            C64::new(0.0, 0.0)
        };
        scalings[l] = c;
        aligned.set_column(l, &(est * c));
    }
    Ok(Alignment {
        aligned,
        permutation,
        scalings,
        ambiguous,
    })
}

/// `‖estimate − reference‖² / ‖reference‖²`, no alignment.
pub fn nmse(estimate: &CMatrix, reference: &CMatrix) -> Result<f64> {
    if estimate.shape() != reference.shape() {
        return Err(Error::mismatch(
            "nmse",
            format!("{}x{}", reference.nrows(), reference.ncols()),
            format!("{}x{}", estimate.nrows(), estimate.ncols()),
        ));
    }
    let denom = reference.norm_squared();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((estimate - reference).norm_squared() / denom)
}

/// NMSE of a steering-matrix estimate after permutation and scaling alignment.
pub fn nmse_steering(estimate: &CMatrix, reference: &CMatrix) -> Result<f64> {
    if reference.norm_squared() == 0.0 {
        return Err(Error::ZeroReference);
    }
    let aligned = align_factors(estimate, reference)?.aligned;
    nmse(&aligned, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{channel_matrix, steering_factor_matrices, steering_matrix, PathSet};
    use crate::geometry::{FimConfig, Orientation};
    use crate::tensor::testutil::random_matrix;
    use crate::training::{build_training_frame, TrainingConfig};
    use std::f64::consts::PI;

    fn surfaces(rx: (usize, usize), tx: (usize, usize)) -> (FimConfig, FimConfig) {
        let txc = FimConfig::new(tx.0, tx.1, 0.5, 0.5, Orientation::new(PI / 4.0, PI / 3.0, PI / 6.0).unwrap(), 1.0).unwrap();
        let rxc = FimConfig::new(rx.0, rx.1, 0.5, 0.5, Orientation::new(PI / 3.0, PI / 6.0, -PI / 4.0).unwrap(), 1.0).unwrap();
        (txc, rxc)
    }

    fn frame(l: usize, slots: (usize, usize), snr: Option<f64>, seed: u64) -> (TrainingFrame, PathSet, TrainingConfig) {
        let (tx, rx) = surfaces((4, 4), (4, 4));
        let cfg = TrainingConfig { tx, rx, rx_slots: slots.0, tx_slots: slots.1, snr_db: snr };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = PathSet::sample(l, &mut rng).unwrap();
        let f = build_training_frame(&cfg, &paths, &mut rng).unwrap();
        (f, paths, cfg)
    }

    /// Ground-truth factors of both phases with gains folded into the shared factors.
    fn truth(f: &TrainingFrame, paths: &PathSet, cfg: &TrainingConfig) -> (PhaseFactors, PhaseFactors) {
        let d = CMatrix::from_diagonal(&paths.gains());
        let b = steering_matrix(&cfg.tx, &f.static_tx, &paths.tx_directions()) * &d;
        let a = steering_matrix(&cfg.rx, &f.static_rx, &paths.rx_directions()) * &d;
        let p1 = f.rx_patterns.iter().map(|p| {
            let (x, z) = steering_factor_matrices(&cfg.rx, p, &paths.rx_directions());
            [x, z]
        }).collect();
        let p2 = f.tx_patterns.iter().map(|p| {
            let (x, z) = steering_factor_matrices(&cfg.tx, p, &paths.tx_directions());
            [x, z]
        }).collect();
        (PhaseFactors { shared: b, private: p1 }, PhaseFactors { shared: a, private: p2 })
    }

    #[test]
    fn kruskal_arithmetic() {
        let d = ArrayDims { rx_nx: 4, rx_nz: 4, tx_nx: 4, tx_nz: 4 };
        assert!(kruskal_check(Phase::ReceiverMorph, &d, 3));
        assert!(kruskal_check(Phase::TransmitterMorph, &d, 3));
        let small = ArrayDims { rx_nx: 2, rx_nz: 2, tx_nx: 2, tx_nz: 2 };
        assert!(!kruskal_check(Phase::ReceiverMorph, &small, 4));
        assert!(!kruskal_check(Phase::ReceiverMorph, &d, 1));
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (f, paths, cfg) = frame(3, (4, 4), None, 11);
        let (mut t1, mut t2) = truth(&f, &paths, &cfg);
        let (o1, o2) = (t1.clone(), t2.clone());
        let p1 = PhaseData::new(Phase::ReceiverMorph, &f.phase1).unwrap();
        let p2 = PhaseData::new(Phase::TransmitterMorph, &f.phase2).unwrap();
        assert!(phase_residual(&p1, &t1) < 1e-20 * p1.energy());
        phase1_update(&p1, &mut t1, false).unwrap();
        phase2_update(&p2, &mut t2, false).unwrap();
        assert!((t1.shared - o1.shared).norm() < 1e-10);
        assert!((t2.shared - o2.shared).norm() < 1e-10);
        for (a, b) in t1.private.iter().zip(&o1.private).chain(t2.private.iter().zip(&o2.private)) {
            assert!((&a[0] - &b[0]).norm() < 1e-10);
            assert!((&a[1] - &b[1]).norm() < 1e-10);
        }
    }

    #[test]
    fn random_start_decreases_residual_monotonically() {
        let (f, _, _) = frame(3, (5, 5), None, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (phase, tensors) in [(Phase::ReceiverMorph, &f.phase1), (Phase::TransmitterMorph, &f.phase2)] {
            let data = PhaseData::new(phase, tensors).unwrap();
            let mut fac = init_factors(&data, 3, &mut rng);
            // fill the first private factor so the starting residual is defined
            for p in fac.private.iter_mut() {
                p[0] = random_matrix(&mut rng, p[0].nrows(), 3);
            }
            let start = phase_residual(&data, &fac);
            let rep = phase_update(&data, &mut fac, true).unwrap();
            assert!(rep.residual < start);
            assert_eq!(rep.substeps.len(), 2 * data.slots() + 2);
            for w in rep.substeps.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn single_slot_shared_update_is_plain_ls() {
        let (f, _, _) = frame(2, (1, 1), None, 13);
        let data = PhaseData::new(Phase::ReceiverMorph, &f.phase1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fac = init_factors(&data, 2, &mut rng);
        phase1_update(&data, &mut fac, false).unwrap();
        // re-solving B against the only slot reproduces the aggregated update
        let coeff = coefficient(fac.slot_factors(Phase::ReceiverMorph, 0), 3);
        let b = ls_solve(&coeff, &data.unfoldings[0][2]).unwrap().x;
        assert!((b - &fac.shared).norm() < 1e-10 * fac.shared.norm());
    }

    #[test]
    fn noiseless_recovery_at_defaults() {
        let (f, paths, cfg) = frame(3, (10, 10), None, 14);
        let res = run_two_phase_als(&f, 3, &AlsOptions::default()).unwrap();
        let h = channel_matrix(&cfg.tx, &cfg.rx, &f.static_tx, &f.static_rx, &paths);
        let e = nmse(&res.channel(), &h).unwrap();
        assert!(e <= 1e-8, "channel NMSE {e}");
        assert!(res.converged);
    }

    #[test]
    fn algebraic_start_is_exact_without_noise() {
        let (f, _, _) = frame(3, (10, 10), None, 21);
        let p1 = PhaseData::new(Phase::ReceiverMorph, &f.phase1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = algebraic_init(&p1, 3, &mut rng).unwrap();
        let r = phase_residual(&p1, &init) / p1.energy();
        assert!(r <= 1e-20, "relative residual {r:e}");
    }

    #[test]
    fn algebraic_start_declines_thin_shared_mode() {
        let (f, _, _) = frame(3, (4, 4), None, 22);
        let p1 = PhaseData::new(Phase::ReceiverMorph, &f.phase1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(algebraic_init(&p1, p1.dims()[2] + 1, &mut rng).is_none());
    }

    #[test]
    fn random_start_still_fits_noiseless_frame() {
        let (f, paths, cfg) = frame(2, (6, 6), None, 23);
        let opts = AlsOptions { algebraic_start: false, max_outer_iterations: 2000, ..Default::default() };
        let res = run_two_phase_als(&f, 2, &opts).unwrap();
        let h = channel_matrix(&cfg.tx, &cfg.rx, &f.static_tx, &f.static_rx, &paths);
        assert!(nmse(&res.channel(), &h).unwrap() <= 1e-8);
    }

    #[test]
    fn rank_one_recovers_quickly() {
        let (f, paths, cfg) = frame(1, (4, 4), None, 15);
        let res = run_two_phase_als(&f, 1, &AlsOptions::default()).unwrap();
        let h = channel_matrix(&cfg.tx, &cfg.rx, &f.static_tx, &f.static_rx, &paths);
        assert!(nmse(&res.channel(), &h).unwrap() < 1e-12);
        assert!(res.iterations <= 5, "took {} iterations", res.iterations);
    }

    #[test]
    fn als_is_deterministic() {
        let (f, _, _) = frame(3, (3, 3), Some(10.0), 16);
        let opts = AlsOptions { seed: 99, ..Default::default() };
        let a = run_two_phase_als(&f, 3, &opts).unwrap();
        let b = run_two_phase_als(&f, 3, &opts).unwrap();
        assert_eq!(a.a_hat, b.a_hat);
        assert_eq!(a.b_hat, b.b_hat);
        assert_eq!(a.alpha_hat, b.alpha_hat);
        assert_eq!(a.residual_history, b.residual_history);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let (f, _, _) = frame(1, (1, 1), None, 17);
        for opts in [
            AlsOptions { restarts: 0, ..Default::default() },
            AlsOptions { tolerance: 0.0, ..Default::default() },
            AlsOptions { max_outer_iterations: 0, ..Default::default() },
        ] {
            assert!(run_two_phase_als(&f, 1, &opts).is_err());
        }
        assert!(run_two_phase_als(&f, 0, &AlsOptions::default()).is_err());
    }

    fn random_perm(rng: &mut ChaCha8Rng, l: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        p
    }

    fn scramble(m: &CMatrix, perm: &[usize], rng: &mut ChaCha8Rng) -> CMatrix {
        let mut out = permute_columns(m, perm);
        for mut col in out.column_iter_mut() {
            let mut s = complex_gaussian(rng, 1.0);
            if s.norm() < 0.1 {
                s += C64::new(1.0, 0.0);
            }
            col *= s;
        }
        out
    }

    #[test]
    fn alignment_removes_permutation_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let reference = random_matrix(&mut rng, 16, 4);
        let perm = random_perm(&mut rng, 4);
        let est = scramble(&reference, &perm, &mut rng);
        let al = align_factors(&est, &reference).unwrap();
        assert!((&al.aligned - &reference).norm() < 1e-12 * reference.norm());
        for (l, &p) in al.permutation.iter().enumerate() {
            assert_eq!(perm[p], l);
        }
        let id = align_factors(&reference, &reference).unwrap();
        assert_eq!(id.permutation, vec![0, 1, 2, 3]);
        assert!(id.scalings.iter().all(|s| (s - C64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn alignment_scaling_is_columnwise_ls_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let reference = random_matrix(&mut rng, 12, 3);
        let noisy = &reference + random_matrix(&mut rng, 12, 3) * C64::new(0.1, 0.0);
        let al = align_factors(&noisy, &reference).unwrap();
        let err = (&al.aligned - &reference).norm();
        for _ in 0..200 {
            let mut other = al.aligned.clone();
            let l = rng.random_range(0..3);
            let jitter = C64::new(1.0, 0.0) + complex_gaussian(&mut rng, 0.01);
            let col = other.column(l) * jitter;
            other.set_column(l, &col);
            assert!(err <= (&other - &reference).norm() + 1e-12);
        }
    }

    #[test]
    fn nmse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let r = random_matrix(&mut rng, 8, 3);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        assert!(nmse_steering(&(&r * C64::new(2.0, 0.0)), &r).unwrap() < 1e-24);
        assert!(matches!(nmse(&r, &CMatrix::zeros(8, 3)), Err(Error::ZeroReference)));

        // perturbation orthogonal to each reference column survives alignment
        let mut e = random_matrix(&mut rng, 8, 3) * C64::new(1e-3, 0.0);
        for l in 0..3 {
            let rc = r.column(l);
            let proj = rc * (rc.dotc(&e.column(l)) / rc.norm_squared());
            let col = e.column(l) - proj;
            e.set_column(l, &col);
        }
        let want = e.norm_squared() / r.norm_squared();
        let got = nmse_steering(&(&r + &e), &r).unwrap();
        assert!((got - want).abs() < 1e-5 * want, "{got} vs {want}");
    }

    #[test]
    fn gain_fit_recovers_planted_gains() {
        let (f, paths, cfg) = frame(3, (1, 1), None, 21);
        let a = steering_matrix(&cfg.rx, &f.static_rx, &paths.rx_directions());
        let b = steering_matrix(&cfg.tx, &f.static_tx, &paths.tx_directions());
        let fit = estimate_gains(&a, &b, &f.reference).unwrap();
        assert_eq!(fit.pairing, vec![0, 1, 2]);
        assert!((fit.alpha - paths.gains()).norm() < 1e-10);

        let zero = CMatrix::zeros(16, 16);
        assert!(estimate_gains(&a, &b, &zero).unwrap().alpha.norm() == 0.0);
    }

    #[test]
    fn single_column_gain_is_scalar_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = random_matrix(&mut rng, 5, 1);
        let b = random_matrix(&mut rng, 4, 1);
        let x = random_matrix(&mut rng, 5, 4);
        let fit = estimate_gains(&a, &b, &x).unwrap();
        let kb = b.kronecker(&a);
        let vx = CVector::from_column_slice(x.as_slice());
        let want = kb.column(0).dotc(&vx) / kb.norm_squared();
        assert!((fit.alpha[0] - want).norm() < 1e-12);
    }

    #[test]
    fn reconstruction_is_invariant_to_factor_ambiguities() {
        let (f, paths, cfg) = frame(3, (1, 1), None, 23);
        let a = steering_matrix(&cfg.rx, &f.static_rx, &paths.rx_directions());
        let b = steering_matrix(&cfg.tx, &f.static_tx, &paths.tx_directions());
        let h = channel_matrix(&cfg.tx, &cfg.rx, &f.static_tx, &f.static_rx, &paths);
        let exact = reconstruct_channel(&a, &b, &paths.gains());
        assert!((&exact - &h).norm() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let pa = random_perm(&mut rng, 3);
            let pb = random_perm(&mut rng, 3);
            let a2 = scramble(&a, &pa, &mut rng);
            let b2 = scramble(&b, &pb, &mut rng);
            let fit = estimate_gains(&a2, &b2, &f.reference).unwrap();
            let h2 = reconstruct_channel(&a2, &permute_columns(&b2, &fit.pairing), &fit.alpha);
            assert!((h2 - &h).norm() < 1e-10 * h.norm().max(1.0));
        }
    }

    #[test]
    fn rank_one_channel_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let h = reconstruct_channel(&random_matrix(&mut rng, 6, 1), &random_matrix(&mut rng, 5, 1), &CVector::from_element(1, C64::new(0.3, 0.2)));
        assert_eq!(crate::channel::numerical_rank(&h, 1e-9).unwrap(), 1);
    }
}
