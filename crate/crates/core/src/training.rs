//! Split single-time-scale training.
//!
//! Phase 1 (`I` slots): the receiver morphs, the transmitter holds its static
//! shape. Each matched-filtered `N × M` observation is reshaped into an
//! `N_x × N_z × M` tensor.
//!
//! Phase 2 (`J` slots): the transmitter morphs, the receiver holds its static
//! shape, giving `N × M_x × M_z` tensors.
//!
//! Because the element index is x-fastest and tensors are stored
//! first-index-fastest, both reshapes are the column-major data of the
//! observation matrix reinterpreted with new dimensions.
//!
//! One extra slot with both surfaces static is recorded as the reference
//! observation used to fit the path gains.

use rand::Rng;

use crate::channel::{channel_matrix, complex_gaussian, PathSet};
use crate::geometry::{sample_morph_pattern, FimConfig, MorphPattern};
use crate::tensor::Tensor3;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Diagonal pilot matrix with unit-modulus entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    diag: CVector,
}

impl PilotMatrix {
    pub fn new(diag: CVector) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidConfig("pilot matrix must be non-empty".into()));
        }
        if diag.iter().any(|s| (s.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidConfig("pilot entries must have unit modulus".into()));
        }
        Ok(Self { diag })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self) -> &CVector {
        &self.diag
    }

    pub fn to_matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&self.diag)
    }

    /// `Y · S` for an `N × M` matrix `Y`.
    pub fn apply(&self, y: &CMatrix) -> CMatrix {
        let mut out = y.clone();
        for (mut col, s) in out.column_iter_mut().zip(self.diag.iter()) {
            col *= *s;
        }
        out
    }

    /// Matched filter `Y · S^H`.
    pub fn matched_filter(&self, y: &CMatrix) -> CMatrix {
        let mut out = y.clone();
        for (mut col, s) in out.column_iter_mut().zip(self.diag.iter()) {
            col *= s.conj();
        }
        out
    }
}

/// Unit-modulus pilots with i.i.d. uniform phases.
pub fn generate_pilots<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<PilotMatrix> {
    let diag = CVector::from_fn(m, |_, _| {
        C64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
    });
    PilotMatrix::new(diag)
}

/// Transmits the pilots through `h`, adds circular Gaussian noise of the
/// given per-entry variance and applies the matched filter.
pub fn observe<R: Rng + ?Sized>(
    h: &CMatrix,
    pilots: &PilotMatrix,
    noise_variance: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    if h.ncols() != pilots.len() {
        return Err(Error::mismatch("pilot length", h.ncols(), pilots.len()));
    }
    let mut y = pilots.apply(h);
    if noise_variance > 0.0 {
        for z in y.iter_mut() {
            *z += complex_gaussian(rng, noise_variance);
        }
    }
    Ok(pilots.matched_filter(&y))
}

/// Both surfaces plus the slot counts and SNR of the training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub tx: FimConfig,
    pub rx: FimConfig,
    /// Number of phase-1 slots (receiver morphs).
    pub rx_slots: usize,
    /// Number of phase-2 slots (transmitter morphs).
    pub tx_slots: usize,
    /// `None` disables noise.
    pub snr_db: Option<f64>,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.tx.validate()?;
        self.rx.validate()?;
        if self.rx_slots == 0 || self.tx_slots == 0 {
            return Err(Error::InvalidConfig(format!(
                "both phases need at least one slot, got I={} J={}",
                self.rx_slots, self.tx_slots
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidConfig("SNR must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Phase-1 observation for one receive morph: an `N_x × N_z × M` tensor.
#[allow(clippy::too_many_arguments)]
pub fn phase1_slot<R: Rng + ?Sized>(
    rx_pattern: &MorphPattern,
    static_tx: &MorphPattern,
    paths: &PathSet,
    tx: &FimConfig,
    rx: &FimConfig,
    pilots: &PilotMatrix,
    noise_variance: f64,
    rng: &mut R,
) -> Result<Tensor3> {
    rx_pattern.validate(rx)?;
    static_tx.validate(tx)?;
    let h = channel_matrix(tx, rx, static_tx, rx_pattern, paths);
    let x = observe(&h, pilots, noise_variance, rng)?;
    Tensor3::new([rx.nx, rx.nz, tx.element_count()], x.as_slice().to_vec())
}

/// Phase-2 observation for one transmit morph: an `N × M_x × M_z` tensor.
#[allow(clippy::too_many_arguments)]
pub fn phase2_slot<R: Rng + ?Sized>(
    static_rx: &MorphPattern,
    tx_pattern: &MorphPattern,
    paths: &PathSet,
    tx: &FimConfig,
    rx: &FimConfig,
    pilots: &PilotMatrix,
    noise_variance: f64,
    rng: &mut R,
) -> Result<Tensor3> {
    static_rx.validate(rx)?;
    tx_pattern.validate(tx)?;
    let h = channel_matrix(tx, rx, tx_pattern, static_rx, paths);
    let x = observe(&h, pilots, noise_variance, rng)?;
    Tensor3::new([rx.element_count(), tx.nx, tx.nz], x.as_slice().to_vec())
}

/// Noise variance for a target SNR: mean received sample power over noise
/// power.
pub fn noise_variance_for(h: &CMatrix, pilots: &PilotMatrix, snr_db: f64) -> f64 {
    let received = pilots.apply(h);
    let power = received.norm_squared() / received.len() as f64;
    power * 10f64.powf(-snr_db / 10.0)
}

/// All observations of one training run.
#[derive(Debug, Clone)]
pub struct TrainingFrame {
    pub phase1: Vec<Tensor3>,
    pub phase2: Vec<Tensor3>,
    pub rx_patterns: Vec<MorphPattern>,
    pub tx_patterns: Vec<MorphPattern>,
    pub static_rx: MorphPattern,
    pub static_tx: MorphPattern,
    /// Matched-filtered `N × M` observation with both surfaces static.
    pub reference: CMatrix,
    pub pilots: PilotMatrix,
    pub snr_db: Option<f64>,
    pub noise_variance: f64,
}

impl TrainingFrame {
    pub fn rx_slots(&self) -> usize {
        self.phase1.len()
    }

    pub fn tx_slots(&self) -> usize {
        self.phase2.len()
    }

    /// `(N_x, N_z, M)` of the phase-1 tensors.
    pub fn phase1_dims(&self) -> [usize; 3] {
        self.phase1[0].dims()
    }

    /// `(N, M_x, M_z)` of the phase-2 tensors.
    pub fn phase2_dims(&self) -> [usize; 3] {
        self.phase2[0].dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase1.is_empty() || self.phase2.is_empty() {
            return Err(Error::InvalidConfig("training frame has an empty phase".into()));
        }
        let d1 = self.phase1_dims();
        let d2 = self.phase2_dims();
        if self.phase1.iter().any(|t| t.dims() != d1) || self.phase2.iter().any(|t| t.dims() != d2)
        {
            return Err(Error::mismatch("training tensors", "uniform dims", "mixed dims"));
        }
        let (n, m) = (d1[0] * d1[1], d1[2]);
        if d2[0] != n || d2[1] * d2[2] != m {
            return Err(Error::mismatch(
                "phase dims",
                format!("N={n} M={m}"),
                format!("{d2:?}"),
            ));
        }
        if self.reference.shape() != (n, m) {
            return Err(Error::mismatch(
                "reference observation",
                format!("{n}x{m}"),
                format!("{}x{}", self.reference.nrows(), self.reference.ncols()),
            ));
        }
        Ok(())
    }
}

/// Random pilots and morph patterns of one training frame, kept apart from
/// the noise so that several SNR points can share one scenario.
#[derive(Debug, Clone)]
pub struct TrainingScenario {
    pub pilots: PilotMatrix,
    pub rx_patterns: Vec<MorphPattern>,
    pub tx_patterns: Vec<MorphPattern>,
}

impl TrainingScenario {
    /// Draws the pilots, then the receive patterns, then the transmit patterns.
    pub fn sample<R: Rng + ?Sized>(cfg: &TrainingConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let pilots = generate_pilots(cfg.tx.element_count(), rng)?;
        let rx_patterns = (0..cfg.rx_slots).map(|_| sample_morph_pattern(&cfg.rx, rng)).collect();
        let tx_patterns = (0..cfg.tx_slots).map(|_| sample_morph_pattern(&cfg.tx, rng)).collect();
        Ok(Self {
            pilots,
            rx_patterns,
            tx_patterns,
        })
    }
}

/// Simulates both phases and the static reference slot for a fixed scenario.
/// `rng` only feeds the receiver noise.
pub fn observe_scenario<R: Rng + ?Sized>(
    cfg: &TrainingConfig,
    paths: &PathSet,
    scenario: &TrainingScenario,
    rng: &mut R,
) -> Result<TrainingFrame> {
    cfg.validate()?;
    let (tx, rx) = (&cfg.tx, &cfg.rx);
    let TrainingScenario {
        pilots,
        rx_patterns,
        tx_patterns,
    } = scenario;
    if rx_patterns.len() != cfg.rx_slots || tx_patterns.len() != cfg.tx_slots {
        return Err(Error::mismatch(
            "scenario slots",
            format!("{}+{}", cfg.rx_slots, cfg.tx_slots),
            format!("{}+{}", rx_patterns.len(), tx_patterns.len()),
        ));
    }
    if pilots.len() != tx.element_count() {
        return Err(Error::mismatch("pilot length", tx.element_count(), pilots.len()));
    }
    let static_rx = MorphPattern::zero(rx);
    let static_tx = MorphPattern::zero(tx);

    let h_static = channel_matrix(tx, rx, &static_tx, &static_rx, paths);
    let noise_variance = cfg
        .snr_db
        .map_or(0.0, |snr| noise_variance_for(&h_static, pilots, snr));

    let phase1 = rx_patterns
        .iter()
        .map(|p| phase1_slot(p, &static_tx, paths, tx, rx, pilots, noise_variance, rng))
        .collect::<Result<Vec<_>>>()?;
    let phase2 = tx_patterns
        .iter()
        .map(|p| phase2_slot(&static_rx, p, paths, tx, rx, pilots, noise_variance, rng))
        .collect::<Result<Vec<_>>>()?;
    let reference = observe(&h_static, pilots, noise_variance, rng)?;

    Ok(TrainingFrame {
        phase1,
        phase2,
        rx_patterns: rx_patterns.clone(),
        tx_patterns: tx_patterns.clone(),
        static_rx,
        static_tx,
        reference,
        pilots: pilots.clone(),
        snr_db: cfg.snr_db,
        noise_variance,
    })
}

/// Runs the full protocol from one stream: one pilot matrix, `I` random
/// receive morphs, `J` random transmit morphs, static shapes fixed to zero
/// displacement.
pub fn build_training_frame<R: Rng + ?Sized>(
    cfg: &TrainingConfig,
    paths: &PathSet,
    rng: &mut R,
) -> Result<TrainingFrame> {
    let scenario = TrainingScenario::sample(cfg, rng)?;
    observe_scenario(cfg, paths, &scenario, rng)
}
