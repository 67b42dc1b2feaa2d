//! Layout-dependent effect (LDE) tables and device-parameter conversion.
//!
//! Each transistor layout arrangement (baseline, side-poly, short-OD) shifts
//! the threshold voltage and transconductance of the device relative to the
//! baseline. The shifts are stored as signed fractions per
//! (polarity, VT flavor, arrangement) and are applied to square-law device
//! parameters by scaling `vth0` directly and folding the transconductance
//! shift into a mobility factor calibrated at a fixed gate bias.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::KvConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdeError {
    #[error("device is off at the calibration bias (vgs = {vcal} V, vth_eff = {vth_eff} V)")]
    DeviceOffAtCalibration { vcal: f64, vth_eff: f64 },
    #[error("unknown model card `{0}`")]
    UnknownModelCard(String),
    #[error("bad table entry `{key}`: {reason}")]
    BadEntry { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Nmos,
    Pmos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flavor {
    Hvt,
    Svt,
    Lvt,
}

/// Transistor layout arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arrangement {
    /// Baseline: generous well and OD clearances.
    Bl,
    /// Side-poly: gate close to the OD/well edge.
    Sp,
    /// Short-OD: minimal diffusion extension on both sides of the gate.
    Sod,
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Nmos, Polarity::Pmos];
}

impl Flavor {
    pub const ALL: [Flavor; 3] = [Flavor::Hvt, Flavor::Svt, Flavor::Lvt];
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [Arrangement::Bl, Arrangement::Sp, Arrangement::Sod];
}

macro_rules! token_enum {
    ($ty:ident, $what:literal, { $($var:ident => $tok:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($ty::$var => $tok),+ };
                f.write_str(s)
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $(if s.eq_ignore_ascii_case($tok) { return Ok($ty::$var); })+
                Err(format!("unknown {} `{}`", $what, s))
            }
        }
    };
}

token_enum!(Polarity, "polarity", { Nmos => "NMOS", Pmos => "PMOS" });
token_enum!(Flavor, "VT flavor", { Hvt => "HVT", Svt => "SVT", Lvt => "LVT" });
token_enum!(Arrangement, "arrangement", { Bl => "BL", Sp => "SP", Sod => "SOD" });

/// Signed fractional shift of |Vth| and gm relative to the baseline arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LdeShift {
    pub vth_shift: f64,
    pub gm_shift: f64,
}

impl LdeShift {
    pub const ZERO: LdeShift = LdeShift {
        vth_shift: 0.0,
        gm_shift: 0.0,
    };

    /// Shifts outside +/-20 % are outside what any layout arrangement produces.
    pub fn is_sane(&self) -> bool {
        self.vth_shift.abs() <= 0.2 && self.gm_shift.abs() <= 0.2
    }
}

type TableKey = (Polarity, Flavor, Arrangement);

/// Measured LDE shift magnitudes in percent, indexed `[polarity][flavor]` as (vth, gm).
const SP_PERCENT: [[(f64, f64); 3]; 2] = [
    // NMOS: HVT, SVT, LVT
    [(4.05, 1.72), (4.38, 2.54), (5.0, 2.42)],
    // PMOS
    [(2.85, 4.76), (3.7, 4.72), (4.59, 4.68)],
];

const SOD_PERCENT: [[(f64, f64); 3]; 2] = [
    [(8.53, 3.7), (9.28, 5.41), (10.61, 5.09)],
    [(6.08, 10.4), (7.9, 10.19), (9.79, 10.16)],
];

/// Measured mismatch standard deviations in percent of the mean, `[arrangement][polarity][flavor]`
/// as (vth_sd, gm_sd).
const MISMATCH_PERCENT: [[[(f64, f64); 3]; 2]; 3] = [
    // BL
    [
        [(15.34, 3.78), (12.29, 2.85), (9.73, 5.93)],
        [(9.78, 3.55), (10.64, 3.98), (12.95, 2.90)],
    ],
    // SP
    [
        [(14.07, 3.63), (11.28, 2.84), (9.16, 5.98)],
        [(9.38, 3.35), (10.12, 3.94), (12.17, 2.83)],
    ],
    // SOD
    [
        [(12.88, 3.45), (10.34, 2.85), (8.61, 6.05)],
        [(8.97, 3.17), (9.58, 3.91), (11.37, 2.75)],
    ],
];

fn pol_idx(p: Polarity) -> usize {
    match p {
        Polarity::Nmos => 0,
        Polarity::Pmos => 1,
    }
}

fn flavor_idx(f: Flavor) -> usize {
    match f {
        Flavor::Hvt => 0,
        Flavor::Svt => 1,
        Flavor::Lvt => 2,
    }
}

fn arr_idx(a: Arrangement) -> usize {
    match a {
        Arrangement::Bl => 0,
        Arrangement::Sp => 1,
        Arrangement::Sod => 2,
    }
}

/// Per-(polarity, flavor, arrangement) LDE shifts at a calibration gate bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdeTable {
    entries: BTreeMap<TableKey, LdeShift>,
    pub calibration_vgs: f64,
}

impl LdeTable {
    pub fn get(&self, polarity: Polarity, flavor: Flavor, arrangement: Arrangement) -> LdeShift {
        self.entries
            .get(&(polarity, flavor, arrangement))
            .copied()
            .unwrap_or(LdeShift::ZERO)
    }

    pub fn set(
        &mut self,
        polarity: Polarity,
        flavor: Flavor,
        arrangement: Arrangement,
        shift: LdeShift,
    ) {
        self.entries.insert((polarity, flavor, arrangement), shift);
    }

    pub fn iter(&self) -> impl Iterator<Item = (TableKey, LdeShift)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// Apply `pmos.svt.sp.vth = 3.7` style overrides (signed percent) and
    /// `lde.calibration_vgs`.
    pub fn apply_overrides(&mut self, cfg: &KvConfig) -> Result<(), LdeError> {
        if let Some(v) = cfg.get("lde.calibration_vgs") {
            self.calibration_vgs = parse_f64("lde.calibration_vgs", v)?;
        }
        for (key, value) in cfg.iter() {
            let key = key.strip_prefix("lde.").unwrap_or(key);
            let parts: Vec<&str> = key.split('.').collect();
            let [pol, fl, arr, param] = parts.as_slice() else {
                continue;
            };
            let (Ok(pol), Ok(fl), Ok(arr)) = (
                pol.parse::<Polarity>(),
                fl.parse::<Flavor>(),
                arr.parse::<Arrangement>(),
            ) else {
                continue;
            };
            let mut shift = self.get(pol, fl, arr);
            let pct = |v: &str| parse_f64(key, v).map(|x| x / 100.0);
            match *param {
                "vth" => shift.vth_shift = pct(value)?,
                "gm" => shift.gm_shift = pct(value)?,
                _ => continue,
            }
            if !shift.is_sane() {
                return Err(LdeError::BadEntry {
                    key: key.to_string(),
                    reason: "shift magnitude above 20%".into(),
                });
            }
            self.set(pol, fl, arr, shift);
        }
        Ok(())
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, LdeError> {
    v.trim().parse::<f64>().map_err(|e| LdeError::BadEntry {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

/// Bundled LDE shifts with the drive-weakening sign convention: SP and SOD
/// raise |Vth| and lower gm.
pub fn default_lde_table() -> LdeTable {
    let mut entries = BTreeMap::new();
    for pol in Polarity::ALL {
        for fl in Flavor::ALL {
            let (pi, fi) = (pol_idx(pol), flavor_idx(fl));
            entries.insert((pol, fl, Arrangement::Bl), LdeShift::ZERO);
            for (arr, src) in [
                (Arrangement::Sp, &SP_PERCENT),
                (Arrangement::Sod, &SOD_PERCENT),
            ] {
                let (vth, gm) = src[pi][fi];
                entries.insert(
                    (pol, fl, arr),
                    LdeShift {
                        vth_shift: vth / 100.0,
                        gm_shift: -gm / 100.0,
                    },
                );
            }
        }
    }
    LdeTable {
        entries,
        calibration_vgs: 1.0,
    }
}

/// Relative standard deviations (fraction of mean) of Vth and gm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchSd {
    pub vth_sd: f64,
    pub gm_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchTable {
    entries: BTreeMap<TableKey, MismatchSd>,
}

impl MismatchTable {
    pub fn get(&self, polarity: Polarity, flavor: Flavor, arrangement: Arrangement) -> MismatchSd {
        self.entries
            .get(&(polarity, flavor, arrangement))
            .copied()
            .unwrap_or(MismatchSd {
                vth_sd: 0.0,
                gm_sd: 0.0,
            })
    }

    pub fn set(
        &mut self,
        polarity: Polarity,
        flavor: Flavor,
        arrangement: Arrangement,
        sd: MismatchSd,
    ) {
        self.entries.insert((polarity, flavor, arrangement), sd);
    }

    /// Every SD multiplied by `factor`; `0.0` gives a variation-free table.
    pub fn scaled(&self, factor: f64) -> MismatchTable {
        MismatchTable {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        *k,
                        MismatchSd {
                            vth_sd: v.vth_sd * factor,
                            gm_sd: v.gm_sd * factor,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (TableKey, MismatchSd)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// `nmos.svt.bl.vth_sd = 12.29` style overrides, in percent.
    pub fn apply_overrides(&mut self, cfg: &KvConfig) -> Result<(), LdeError> {
        for (key, value) in cfg.iter() {
            let key = key.strip_prefix("mismatch.").unwrap_or(key);
            let parts: Vec<&str> = key.split('.').collect();
            let [pol, fl, arr, param] = parts.as_slice() else {
                continue;
            };
            let (Ok(pol), Ok(fl), Ok(arr)) = (
                pol.parse::<Polarity>(),
                fl.parse::<Flavor>(),
                arr.parse::<Arrangement>(),
            ) else {
                continue;
            };
            let mut sd = self.get(pol, fl, arr);
            let v = parse_f64(key, value)? / 100.0;
            if v < 0.0 {
                return Err(LdeError::BadEntry {
                    key: key.to_string(),
                    reason: "negative standard deviation".into(),
                });
            }
            match *param {
                "vth_sd" => sd.vth_sd = v,
                "gm_sd" => sd.gm_sd = v,
                _ => continue,
            }
            self.set(pol, fl, arr, sd);
        }
        Ok(())
    }
}

pub fn default_mismatch_table() -> MismatchTable {
    let mut entries = BTreeMap::new();
    for pol in Polarity::ALL {
        for fl in Flavor::ALL {
            for arr in Arrangement::ALL {
                let (vth, gm) = MISMATCH_PERCENT[arr_idx(arr)][pol_idx(pol)][flavor_idx(fl)];
                entries.insert(
                    (pol, fl, arr),
                    MismatchSd {
                        vth_sd: vth / 100.0,
                        gm_sd: gm / 100.0,
                    },
                );
            }
        }
    }
    MismatchTable { entries }
}

/// Square-law parameters of one resolved transistor instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Zero-bias threshold magnitude (V).
    pub vth0: f64,
    /// Transconductance factor mu*Cox*W/L (A/V^2).
    pub k: f64,
    /// Channel-length modulation (1/V).
    pub lambda: f64,
    /// Body-effect coefficient (sqrt(V)).
    pub gamma: f64,
    /// Surface potential 2*phi_F (V).
    pub phi: f64,
    /// Gate-oxide capacitance Cox*W*L (F).
    pub cox_area_cap: f64,
    /// Overlap capacitance per unit width (F/m).
    pub overlap_cap_per_width: f64,
    /// Drawn width including finger multiplier (m).
    pub width: f64,
}

impl DeviceParams {
    pub fn overlap_cap(&self) -> f64 {
        self.overlap_cap_per_width * self.width
    }
}

/// Technology values for one (polarity, flavor) in a model card.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub vth0: f64,
    /// mu*Cox (A/V^2).
    pub u0cox: f64,
    /// lambda * L (m/V); lambda scales inversely with drawn length.
    pub lambda_l: f64,
    pub gamma: f64,
    pub phi: f64,
    /// Cox per area (F/m^2).
    pub cox: f64,
    /// Overlap capacitance per width (F/m).
    pub cov: f64,
}

/// Synthetic technology card. Two cards ship: `n65` and `n28`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub name: String,
    /// Gate bias at which LDE shifts are specified.
    pub calibration_vgs: f64,
    /// Minimum drawn length (m).
    pub lmin: f64,
    params: BTreeMap<(Polarity, Flavor), ProcessParams>,
}

impl ModelCard {
    pub fn n65() -> ModelCard {
        Self::build(
            "n65",
            1.0,
            60e-9,
            [0.40, 0.40],
            0.10,
            [400e-6, 160e-6],
            [25e-9, 25e-9],
        )
    }

    pub fn n28() -> ModelCard {
        Self::build(
            "n28",
            0.9,
            30e-9,
            [0.35, 0.35],
            0.08,
            [520e-6, 230e-6],
            [20e-9, 20e-9],
        )
    }

    pub fn by_name(name: &str) -> Result<ModelCard, LdeError> {
        match name.to_ascii_lowercase().as_str() {
            "n65" => Ok(Self::n65()),
            "n28" => Ok(Self::n28()),
            other => Err(LdeError::UnknownModelCard(other.to_string())),
        }
    }

    fn build(
        name: &str,
        calibration_vgs: f64,
        lmin: f64,
        svt: [f64; 2],
        vt_step: f64,
        u0cox: [f64; 2],
        lambda_l: [f64; 2],
    ) -> ModelCard {
        let mut params = BTreeMap::new();
        for pol in Polarity::ALL {
            let pi = pol_idx(pol);
            for fl in Flavor::ALL {
                let vth0 = match fl {
                    Flavor::Hvt => svt[pi] + vt_step,
                    Flavor::Svt => svt[pi],
                    Flavor::Lvt => svt[pi] - vt_step,
                };
                params.insert(
                    (pol, fl),
                    ProcessParams {
                        vth0,
                        u0cox: u0cox[pi],
                        lambda_l: lambda_l[pi],
                        gamma: 0.3,
                        phi: 0.8,
                        cox: 12e-3,
                        cov: 0.3e-9,
                    },
                );
            }
        }
        ModelCard {
            name: name.to_string(),
            calibration_vgs,
            lmin,
            params,
        }
    }

    pub fn process(&self, polarity: Polarity, flavor: Flavor) -> ProcessParams {
        self.params[&(polarity, flavor)]
    }

    pub fn set_process(&mut self, polarity: Polarity, flavor: Flavor, p: ProcessParams) {
        self.params.insert((polarity, flavor), p);
    }

    /// Baseline parameters for a device of drawn width `w` (all fingers) and length `l`.
    pub fn device_params(
        &self,
        polarity: Polarity,
        flavor: Flavor,
        w: f64,
        l: f64,
    ) -> DeviceParams {
        let p = self.process(polarity, flavor);
        DeviceParams {
            vth0: p.vth0,
            k: p.u0cox * w / l,
            lambda: p.lambda_l / l,
            gamma: p.gamma,
            phi: p.phi,
            cox_area_cap: p.cox * w * l,
            overlap_cap_per_width: p.cov,
            width: w,
        }
    }

    /// Matching LDE table: bundled shifts at this card's calibration bias.
    pub fn lde_table(&self) -> LdeTable {
        LdeTable {
            calibration_vgs: self.calibration_vgs,
            ..default_lde_table()
        }
    }
}

/// Mobility factor that makes the shifted device show `gm * (1 + gm_shift)` at
/// `vgs = vcal` in saturation.
pub fn calibrate_mobility_factor(
    p: &DeviceParams,
    shift: LdeShift,
    vcal: f64,
) -> Result<f64, LdeError> {
    let vth_eff = p.vth0 * (1.0 + shift.vth_shift);
    if vcal <= vth_eff || vcal <= p.vth0 {
        return Err(LdeError::DeviceOffAtCalibration { vcal, vth_eff });
    }
    Ok((1.0 + shift.gm_shift) * (vcal - p.vth0) / (vcal - vth_eff))
}

/// Effective device parameters for arrangement `a`. `BL` returns `p` untouched.
pub fn apply_arrangement(
    p: &DeviceParams,
    polarity: Polarity,
    flavor: Flavor,
    a: Arrangement,
    table: &LdeTable,
) -> Result<DeviceParams, LdeError> {
    if a == Arrangement::Bl {
        return Ok(*p);
    }
    let shift = table.get(polarity, flavor, a);
    let m = calibrate_mobility_factor(p, shift, table.calibration_vgs)?;
    Ok(DeviceParams {
        vth0: p.vth0 * (1.0 + shift.vth_shift),
        k: p.k * m,
        ..*p
    })
}

fn scale(p: &DeviceParams, sd: MismatchSd, z_vth: f64, z_k: f64) -> DeviceParams {
    // Multipliers are floored so a far tail sample never flips the sign of a parameter.
    DeviceParams {
        vth0: p.vth0 * (1.0 + sd.vth_sd * z_vth).max(0.05),
        k: p.k * (1.0 + sd.gm_sd * z_k).max(0.05),
        ..*p
    }
}

/// Independent per-device variation: `vth0` and `k` scaled by N(1, sd^2).
pub fn sample_mismatch<R: Rng + ?Sized>(
    rng: &mut R,
    p: &DeviceParams,
    polarity: Polarity,
    flavor: Flavor,
    a: Arrangement,
    table: &MismatchTable,
) -> DeviceParams {
    let z_vth: f64 = StandardNormal.sample(rng);
    let z_k: f64 = StandardNormal.sample(rng);
    scale(p, table.get(polarity, flavor, a), z_vth, z_k)
}

/// One fabricated die: a shared normal draw per (polarity, flavor) for Vth and
/// for the transconductance factor, scaled per device by the arrangement's SD.
///
/// Devices of the same type move together, so matched pairs stay matched while
/// the whole die drifts across the process spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieSample {
    pub seed: u64,
    z: BTreeMap<(Polarity, Flavor), (f64, f64)>,
}

impl DieSample {
    pub fn draw(seed: u64) -> DieSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = BTreeMap::new();
        for pol in Polarity::ALL {
            for fl in Flavor::ALL {
                let zv: f64 = StandardNormal.sample(&mut rng);
                let zk: f64 = StandardNormal.sample(&mut rng);
                z.insert((pol, fl), (zv, zk));
            }
        }
        DieSample { seed, z }
    }

    pub fn apply(
        &self,
        p: &DeviceParams,
        polarity: Polarity,
        flavor: Flavor,
        a: Arrangement,
        table: &MismatchTable,
    ) -> DeviceParams {
        let (zv, zk) = self.z[&(polarity, flavor)];
        scale(p, table.get(polarity, flavor, a), zv, zk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(vth0: f64) -> DeviceParams {
        DeviceParams {
            vth0,
            k: 1e-3,
            lambda: 0.0,
            gamma: 0.0,
            phi: 0.8,
            cox_area_cap: 1e-15,
            overlap_cap_per_width: 0.3e-9,
            width: 1e-6,
        }
    }

    #[test]
    fn shift_spot_values() {
        let t = default_lde_table();
        let s = t.get(Polarity::Pmos, Flavor::Svt, Arrangement::Sp);
        assert!((s.vth_shift.abs() - 0.037).abs() < 1e-12);
        let s = t.get(Polarity::Nmos, Flavor::Lvt, Arrangement::Sod);
        assert!((s.vth_shift.abs() - 0.1061).abs() < 1e-12);
        let s = t.get(Polarity::Pmos, Flavor::Hvt, Arrangement::Sod);
        assert!((s.gm_shift.abs() - 0.104).abs() < 1e-12);
        for pol in Polarity::ALL {
            for fl in Flavor::ALL {
                assert_eq!(t.get(pol, fl, Arrangement::Bl), LdeShift::ZERO);
            }
        }
    }

    #[test]
    fn table_ordering_sod_beyond_sp() {
        let t = default_lde_table();
        for pol in Polarity::ALL {
            for fl in Flavor::ALL {
                let sp = t.get(pol, fl, Arrangement::Sp);
                let sod = t.get(pol, fl, Arrangement::Sod);
                assert!(sod.vth_shift.abs() > sp.vth_shift.abs() && sp.vth_shift.abs() > 0.0);
                assert!(sod.gm_shift.abs() > sp.gm_shift.abs() && sp.gm_shift.abs() > 0.0);
                assert!(sp.is_sane() && sod.is_sane());
            }
        }
    }

    #[test]
    fn mismatch_spot_values() {
        let m = default_mismatch_table();
        assert!(
            (m.get(Polarity::Pmos, Flavor::Svt, Arrangement::Bl).vth_sd - 0.1064).abs() < 1e-12
        );
        assert!(
            (m.get(Polarity::Nmos, Flavor::Hvt, Arrangement::Bl).vth_sd - 0.1534).abs() < 1e-12
        );
        assert!(
            (m.get(Polarity::Nmos, Flavor::Lvt, Arrangement::Sod).gm_sd - 0.0605).abs() < 1e-12
        );
        assert!(m.iter().all(|(_, sd)| sd.vth_sd > 0.0 && sd.gm_sd > 0.0));
        assert_eq!(m.iter().count(), 18);
    }

    #[test]
    fn mobility_factor_identity_and_closed_form() {
        let p = dev(0.4);
        assert_eq!(
            calibrate_mobility_factor(&p, LdeShift::ZERO, 1.0).unwrap(),
            1.0
        );
        let m = calibrate_mobility_factor(
            &p,
            LdeShift {
                vth_shift: 0.05,
                gm_shift: 0.0,
            },
            1.0,
        )
        .unwrap();
        assert!((m - 0.6 / 0.58).abs() < 1e-12);
    }

    #[test]
    fn mobility_factor_rejects_off_device() {
        let p = dev(0.95);
        let err = calibrate_mobility_factor(
            &p,
            LdeShift {
                vth_shift: 0.1,
                gm_shift: 0.0,
            },
            1.0,
        );
        assert!(matches!(err, Err(LdeError::DeviceOffAtCalibration { .. })));
    }

    #[test]
    fn baseline_is_identity() {
        let p = dev(0.4);
        let t = default_lde_table();
        let q = apply_arrangement(&p, Polarity::Nmos, Flavor::Svt, Arrangement::Bl, &t).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn nmos_svt_sod_threshold() {
        let p = dev(0.4);
        let t = default_lde_table();
        let q = apply_arrangement(&p, Polarity::Nmos, Flavor::Svt, Arrangement::Sod, &t).unwrap();
        assert!((q.vth0 - 0.43712).abs() < 1e-12);
        assert_eq!(q.lambda, p.lambda);
        assert_eq!(q.cox_area_cap, p.cox_area_cap);
    }

    #[test]
    fn overrides_parse_signed_percent() {
        let mut t = default_lde_table();
        let cfg =
            KvConfig::parse("[lde]\ncalibration_vgs = 0.9\npmos.svt.sp.vth = -3.0\n").unwrap();
        t.apply_overrides(&cfg).unwrap();
        assert_eq!(t.calibration_vgs, 0.9);
        assert!(
            (t.get(Polarity::Pmos, Flavor::Svt, Arrangement::Sp)
                .vth_shift
                + 0.03)
                .abs()
                < 1e-12
        );
        let bad = KvConfig::parse("nmos.svt.sod.gm = 40\n").unwrap();
        assert!(t.apply_overrides(&bad).is_err());
    }

    #[test]
    fn mismatch_zero_sd_is_identity_and_seeded() {
        let p = dev(0.4);
        let zero = default_mismatch_table().scaled(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = sample_mismatch(
            &mut rng,
            &p,
            Polarity::Pmos,
            Flavor::Svt,
            Arrangement::Bl,
            &zero,
        );
        assert_eq!(p, q);

        let m = default_mismatch_table();
        let a = sample_mismatch(
            &mut ChaCha8Rng::seed_from_u64(9),
            &p,
            Polarity::Pmos,
            Flavor::Svt,
            Arrangement::Sp,
            &m,
        );
        let b = sample_mismatch(
            &mut ChaCha8Rng::seed_from_u64(9),
            &p,
            Polarity::Pmos,
            Flavor::Svt,
            Arrangement::Sp,
            &m,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn die_sample_is_deterministic() {
        assert_eq!(DieSample::draw(5), DieSample::draw(5));
        assert_ne!(DieSample::draw(5), DieSample::draw(6));
    }
}
