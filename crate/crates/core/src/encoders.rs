//! Visit feature encoders: multi-scale location, Time2Vec arrival and
//! departure times, and the fixed sinusoidal positional encoding.

use std::f64::consts::TAU;

use mepoi_numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Normalizer, Visit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of location scales S.
    pub scales: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Width of one time encoding (hour block + day block).
    pub time_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { scales: 64, lambda_min: 0.1, lambda_max: 1.4142, time_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.lambda_min <= 0.0 || self.lambda_min >= self.lambda_max {
            return Err(Error::Config(
                "encoder: need scales >= 1 and 0 < lambda_min < lambda_max".into(),
            ));
        }
        if self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(Error::Config("encoder: time_dim must be even and at least 4".into()));
        }
        Ok(())
    }

    pub fn location_dim(&self) -> usize {
        6 * self.scales
    }

    pub fn model_dim(&self) -> usize {
        self.location_dim() + 2 * self.time_dim
    }
}

/// Unit direction vectors at 0°, 120° and 240°.
pub const DIRECTIONS: [[f64; 2]; 3] = [
    [1.0, 0.0],
    [-0.5, 0.866_025_403_784_438_6],
    [-0.5, -0.866_025_403_784_438_6],
];

/// Geometric wavelength progression from `lambda_min` to `lambda_max`.
pub fn wavelengths(cfg: &EncoderConfig) -> Vec<f64> {
    let s = cfg.scales;
    if s == 1 {
        return vec![cfg.lambda_min];
    }
    let ratio = cfg.lambda_max / cfg.lambda_min;
    (0..s)
        .map(|i| {
            if i == s - 1 {
                cfg.lambda_max
            } else {
                cfg.lambda_min * ratio.powf(i as f64 / (s - 1) as f64)
            }
        })
        .collect()
}

/// Parameter-free multi-scale encoding of a normalized coordinate.
/// Layout: scale-major, then direction, then `[sin, cos]`.
pub fn encode_location(x: [f64; 2], cfg: &EncoderConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.location_dim());
    for lambda in wavelengths(cfg) {
        for a in DIRECTIONS {
            let angle = (x[0] * a[0] + x[1] * a[1]) * TAU / lambda;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    out
}

/// `PE[2k] = sin(i / 10000^(2k/d))`, `PE[2k+1] = cos(…)`.
pub fn positional_encoding(i: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = i as f64 / 10_000f64.powf(2.0 * k / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Initial Time2Vec frequencies for a block of width `k`: 1 for the
/// linear component, then a geometric ladder from 2π to 2π·2⁶.
pub fn time2vec_init(k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| match i {
            0 => 1.0,
            _ if k <= 2 => TAU,
            _ => TAU * 2f64.powf(6.0 * (i - 1) as f64 / (k - 2) as f64),
        })
        .collect()
}

/// Frequencies and phases of one Time2Vec block.
#[derive(Clone, Copy, Debug)]
pub struct Time2Vec {
    pub omega: ParamId,
    pub phi: ParamId,
}

impl Time2Vec {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, k: usize) -> Result<Self> {
        let omega = store.add(
            format!("{name}.omega"),
            Tensor::from_f64(vec![1, k], &time2vec_init(k))?,
        )?;
        let phi = store.add(format!("{name}.phi"), Tensor::zeros(vec![1, k]))?;
        Ok(Time2Vec { omega, phi })
    }

    /// `tau` is `[n, 1]`; returns `[n, k]` with column 0 linear.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tau: Var) -> Result<Var> {
        let w = g.param(self.omega);
        let p = g.param(self.phi);
        let lin = g.matmul(tau, w)?;
        let shifted = g.add_row(lin, p)?;
        Ok(g.periodic_tail(shifted))
    }
}

/// Arrival or departure encoder: hour-of-day block then day-of-week block.
#[derive(Clone, Copy, Debug)]
pub struct TimeEncoder {
    pub hour: Time2Vec,
    pub day: Time2Vec,
}

impl TimeEncoder {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, time_dim: usize) -> Result<Self> {
        Ok(TimeEncoder {
            hour: Time2Vec::register(store, &format!("{name}.hour"), time_dim / 2)?,
            day: Time2Vec::register(store, &format!("{name}.day"), time_dim / 2)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, hour: Var, day: Var) -> Result<Var> {
        let h = self.hour.forward(g, hour)?;
        let d = self.day.forward(g, day)?;
        Ok(g.concat(&[h, d])?)
    }
}

/// Precomputed per-visit inputs: location base and the four time scalars.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisitFeatures {
    pub loc_dim: usize,
    pub location: Vec<f64>,
    pub arr_hour: Vec<f64>,
    pub arr_day: Vec<f64>,
    pub dep_hour: Vec<f64>,
    pub dep_day: Vec<f64>,
}

impl VisitFeatures {
    pub fn len(&self) -> usize {
        self.arr_hour.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arr_hour.is_empty()
    }

    pub fn push(&mut self, x: [f64; 2], t_a: i64, t_d: i64, cfg: &EncoderConfig) {
        self.loc_dim = cfg.location_dim();
        self.location.extend(encode_location(x, cfg));
        let (ah, ad) = Normalizer::time(t_a);
        let (dh, dd) = Normalizer::time(t_d);
        self.arr_hour.push(ah);
        self.arr_day.push(ad);
        self.dep_hour.push(dh);
        self.dep_day.push(dd);
    }

    pub fn from_visits(visits: &[Visit], norm: &Normalizer, cfg: &EncoderConfig) -> Self {
        let mut f = VisitFeatures { loc_dim: cfg.location_dim(), ..Default::default() };
        for v in visits {
            f.push(norm.location(crate::geo::LatLon::new(v.lat, v.lon)), v.t_a, v.t_d, cfg);
        }
        f
    }
}

/// The learnable part of the visit encoder.
#[derive(Clone, Debug)]
pub struct VisitEncoder {
    pub config: EncoderConfig,
    pub arrival: TimeEncoder,
    pub departure: TimeEncoder,
}

impl VisitEncoder {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(VisitEncoder {
            config: config.clone(),
            arrival: TimeEncoder::register(store, "enc.arrival", config.time_dim)?,
            departure: TimeEncoder::register(store, "enc.departure", config.time_dim)?,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim()
    }

    /// Encodes the visits selected by `rows` (indices into `f`, `None`
    /// for padding rows, which encode as zeros) into `[rows, d_h]` in the
    /// order location, arrival, departure.
    pub fn assemble<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f: &VisitFeatures,
        rows: &[Option<usize>],
    ) -> Result<Var> {
        let ld = self.config.location_dim();
        if f.loc_dim != ld {
            return Err(Error::Config(format!(
                "visit features have location width {}, encoder expects {ld}",
                f.loc_dim
            )));
        }
        let n = rows.len();
        let mut loc = Vec::with_capacity(n * ld);
        let mut cols: [Vec<T>; 4] = Default::default();
        for r in rows {
            match *r {
                Some(i) => {
                    loc.extend(f.location[i * ld..(i + 1) * ld].iter().map(|&v| T::c(v)));
                    for (c, src) in cols.iter_mut().zip([&f.arr_hour, &f.arr_day, &f.dep_hour, &f.dep_day]) {
                        c.push(T::c(src[i]));
                    }
                }
                None => {
                    loc.extend(std::iter::repeat_n(T::zero(), ld));
                    cols.iter_mut().for_each(|c| c.push(T::zero()));
                }
            }
        }
        let loc = g.constant(Tensor::new(vec![n, ld], loc)?);
        let [ah, ad, dh, dd] = cols.map(|c| Tensor::new(vec![n, 1], c).expect("n rows"));
        let (ah, ad, dh, dd) = (g.constant(ah), g.constant(ad), g.constant(dh), g.constant(dd));
        let arr = self.arrival.forward(g, ah, ad)?;
        let dep = self.departure.forward(g, dh, dd)?;
        Ok(g.concat(&[loc, arr, dep])?)
    }
}
