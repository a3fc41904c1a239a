//! Device description files for `hw-plan`.
//!
//! Plain key-value TOML. Coefficients are given either directly
//! (`lut_tree`, `lut_entry`, `lut_lp`) or as a `[calibration]` table holding
//! a measured LUT breakdown they are solved from.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use ternlut::hwmodel::{DeviceBudget, LutCoefficients, Method};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    #[serde(default)]
    name: Option<String>,
    n_uram: u64,
    lut_max: u64,
    lut_tree: Option<f64>,
    lut_entry: Option<f64>,
    lut_lp: Option<f64>,
    calibration: Option<Calibration>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Calibration {
    method: Method,
    g: usize,
    t: usize,
    q: usize,
    lut_pre: f64,
    lut_tb: f64,
    lut_lpl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub name: String,
    pub budget: DeviceBudget,
}

pub fn parse_device(text: &str) -> Result<Device> {
    let f: DeviceFile = toml::from_str(text).context("parsing device file")?;
    let coefficients = match (f.lut_tree, f.lut_entry, f.lut_lp, f.calibration) {
        (Some(lut_tree), Some(lut_entry), Some(lut_lp), None) => LutCoefficients {
            lut_tree,
            lut_entry,
            lut_lp,
        },
        (None, None, None, Some(c)) => {
            LutCoefficients::calibrate(c.method, c.g, c.t, c.q, c.lut_pre, c.lut_tb, c.lut_lpl)?
        }
        _ => bail!("device file needs either lut_tree/lut_entry/lut_lp or a [calibration] table"),
    };
    Ok(Device {
        name: f.name.unwrap_or_else(|| "device".into()),
        budget: DeviceBudget::new(f.n_uram, f.lut_max, coefficients)?,
    })
}
