//! Long-channel square-law MOSFET with channel-length modulation and body effect.

use serde::{Deserialize, Serialize};

use crate::lde::{DeviceParams, Polarity};

pub const DEFAULT_GMIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Cutoff,
    Triode,
    Saturation,
}

/// Drain current (into the drain terminal) and its partial derivatives with
/// respect to the nominal terminal voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosEval {
    pub id: f64,
    pub did_dvgs: f64,
    pub did_dvds: f64,
    pub did_dvbs: f64,
    pub region: Region,
    /// Channel conducts with drain and source roles exchanged.
    pub reversed: bool,
}

struct Core {
    id: f64,
    g: f64,
    d: f64,
    b: f64,
    region: Region,
}

/// Threshold with body effect and d(vth)/d(vbs).
fn threshold(p: &DeviceParams, vbs: f64) -> (f64, f64) {
    let sphi = p.phi.sqrt();
    let (sarg, dsarg) = if vbs <= 0.0 {
        let s = (p.phi - vbs).sqrt();
        (s, -0.5 / s)
    } else {
        // Forward body bias: rational continuation, C1 at vbs = 0.
        let den = 1.0 + 0.5 * vbs / p.phi;
        (sphi / den, -0.5 * sphi / p.phi / (den * den))
    };
    (p.vth0 + p.gamma * (sarg - sphi), p.gamma * dsarg)
}

/// N-type channel current for vds >= 0.
fn core(p: &DeviceParams, vgs: f64, vds: f64, vbs: f64) -> Core {
    let (vth, dvth_dvbs) = threshold(p, vbs);
    let vov = vgs - vth;
    if vov <= 0.0 {
        return Core {
            id: 0.0,
            g: 0.0,
            d: 0.0,
            b: 0.0,
            region: Region::Cutoff,
        };
    }
    let clm = 1.0 + p.lambda * vds;
    let (id, did_dvov, did_dvds, region) = if vds < vov {
        let base = vov * vds - 0.5 * vds * vds;
        (
            p.k * base * clm,
            p.k * vds * clm,
            p.k * (vov - vds) * clm + p.k * base * p.lambda,
            Region::Triode,
        )
    } else {
        (
            0.5 * p.k * vov * vov * clm,
            p.k * vov * clm,
            0.5 * p.k * vov * vov * p.lambda,
            Region::Saturation,
        )
    };
    Core {
        id,
        g: did_dvov,
        d: did_dvds,
        b: -did_dvov * dvth_dvbs,
        region,
    }
}

/// N-type evaluation with source/drain exchange for negative vds.
fn n_eval(p: &DeviceParams, vgs: f64, vds: f64, vbs: f64) -> MosEval {
    if vds >= 0.0 {
        let c = core(p, vgs, vds, vbs);
        MosEval {
            id: c.id,
            did_dvgs: c.g,
            did_dvds: c.d,
            did_dvbs: c.b,
            region: c.region,
            reversed: false,
        }
    } else {
        // Roles swap: the nominal drain acts as source.
        let c = core(p, vgs - vds, -vds, vbs - vds);
        MosEval {
            id: -c.id,
            did_dvgs: -c.g,
            did_dvds: c.g + c.d + c.b,
            did_dvbs: -c.b,
            region: c.region,
            reversed: true,
        }
    }
}

/// Evaluate the device with the default drain-source gmin.
pub fn mosfet_eval(p: &DeviceParams, polarity: Polarity, vgs: f64, vds: f64, vbs: f64) -> MosEval {
    mosfet_eval_gmin(p, polarity, vgs, vds, vbs, DEFAULT_GMIN)
}

/// Evaluate the device; `gmin` is a conductance in parallel with drain-source.
pub fn mosfet_eval_gmin(
    p: &DeviceParams,
    polarity: Polarity,
    vgs: f64,
    vds: f64,
    vbs: f64,
    gmin: f64,
) -> MosEval {
    let mut e = match polarity {
        Polarity::Nmos => n_eval(p, vgs, vds, vbs),
        Polarity::Pmos => {
            // Mirror image of the n-type device: id_p(v) = -id_n(-v); derivatives keep their sign.
            let n = n_eval(p, -vgs, -vds, -vbs);
            MosEval { id: -n.id, ..n }
        }
    };
    e.id += gmin * vds;
    e.did_dvds += gmin;
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lambda: f64, gamma: f64) -> DeviceParams {
        DeviceParams {
            vth0: 0.4,
            k: 1e-3,
            lambda,
            gamma,
            phi: 0.8,
            cox_area_cap: 1e-15,
            overlap_cap_per_width: 0.3e-9,
            width: 1e-6,
        }
    }

    #[test]
    fn cutoff_is_gmin_only() {
        let p = params(0.1, 0.3);
        let e = mosfet_eval(&p, Polarity::Nmos, 0.3, 0.7, 0.0);
        assert_eq!(e.region, Region::Cutoff);
        assert_eq!(e.id, DEFAULT_GMIN * 0.7);
        assert_eq!(e.did_dvgs, 0.0);
    }

    #[test]
    fn saturation_closed_form() {
        let p = params(0.0, 0.0);
        let e = mosfet_eval_gmin(&p, Polarity::Nmos, 1.0, 1.0, 0.0, 0.0);
        assert_eq!(e.region, Region::Saturation);
        assert!((e.id / 180e-6 - 1.0).abs() < 1e-12);
        assert!((e.did_dvgs / 6e-4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pmos_is_mirror_of_nmos() {
        let p = params(0.1, 0.3);
        let n = mosfet_eval(&p, Polarity::Nmos, 0.9, 0.5, -0.2);
        let q = mosfet_eval(&p, Polarity::Pmos, -0.9, -0.5, 0.2);
        assert!((n.id + q.id).abs() < 1e-18);
        assert_eq!(n.did_dvgs, q.did_dvgs);
        assert_eq!(n.did_dvds, q.did_dvds);
        assert!(q.did_dvgs > 0.0);
    }

    #[test]
    fn reversed_conduction_is_antisymmetric() {
        let p = params(0.05, 0.0);
        // Drain and source exchanged with gate referenced accordingly.
        let fwd = mosfet_eval(&p, Polarity::Nmos, 1.0, 0.3, 0.0);
        let rev = mosfet_eval(&p, Polarity::Nmos, 0.7, -0.3, -0.3);
        assert!(rev.reversed);
        assert!((fwd.id + rev.id).abs() < 1e-15);
    }

    #[test]
    fn body_effect_raises_threshold() {
        let p = params(0.0, 0.4);
        let a = mosfet_eval(&p, Polarity::Nmos, 1.0, 1.0, 0.0);
        let b = mosfet_eval(&p, Polarity::Nmos, 1.0, 1.0, -0.5);
        assert!(b.id < a.id);
        assert!(b.did_dvbs > 0.0);
    }
}
