//! Named two-dimensional task configurations.

use std::fmt;
use std::str::FromStr;

use super::{BaseDistributionSpec, SdcConfig};
use crate::error::{Result, SdcError};

/// Cluster spread of the benchmark distributions.
pub const SYNTH_STDDEV: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Three tight foreground clusters and a three-component background
    /// mixture, `m = 9`.
    SynthAppendixD,
    /// Foregrounds along the diagonal where the sum-of-coordinates focus ranks
    /// one foreground class below the background.
    ErrorMode1,
    /// Background sits between foreground clusters, so no linear focus
    /// function ranks every foreground above it.
    ErrorMode2,
    /// Six classes whose averages with the background stay separable while
    /// the focus network is still far from the foreground, so the
    /// classifier can succeed without focusing.
    ErrorMode3,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SynthAppendixD,
        Preset::ErrorMode1,
        Preset::ErrorMode2,
        Preset::ErrorMode3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SynthAppendixD => "synth-appdx-d",
            Preset::ErrorMode1 => "em1",
            Preset::ErrorMode2 => "em2",
            Preset::ErrorMode3 => "em3",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Preset::ALL.iter().map(|p| p.name()).collect()
    }

    /// Instance count and test fraction used when none are given.
    pub fn default_size(self) -> (usize, f64) {
        match self {
            Preset::SynthAppendixD => (6000, 0.5),
            _ => (200, 0.0),
        }
    }

    pub fn config(self) -> SdcConfig {
        let g = BaseDistributionSpec::gaussian;
        let (background, foregrounds, k) = match self {
            Preset::SynthAppendixD => (
                BaseDistributionSpec::equal_mixture(
                    vec![vec![0.0, 0.0], vec![-3.0, -3.0], vec![0.0, 3.0]],
                    SYNTH_STDDEV,
                ),
                vec![
                    g(vec![3.0, 3.0], SYNTH_STDDEV),
                    g(vec![-3.0, 3.0], SYNTH_STDDEV),
                    g(vec![3.0, -3.0], SYNTH_STDDEV),
                ],
                3,
            ),
            Preset::ErrorMode1 => (
                g(vec![0.0, 0.0], 0.2),
                vec![
                    g(vec![2.5, 1.5], 0.1),
                    g(vec![-1.0, 1.0], 0.1),
                    g(vec![1.5, 2.5], 0.1),
                ],
                3,
            ),
            Preset::ErrorMode2 => (
                g(vec![0.0, 0.0], 0.1),
                vec![
                    g(vec![-1.5, 0.0], 0.1),
                    g(vec![1.5, 0.0], 0.1),
                    g(vec![0.0, 1.5], 0.1),
                ],
                3,
            ),
            Preset::ErrorMode3 => {
                // a column left of the background; f = -x1 focuses perfectly
                let fg = (0..6)
                    .map(|c| g(vec![-1.5, 1.8 * c as f64 - 4.5], 0.05))
                    .collect();
                (g(vec![0.0, 0.0], 0.05), fg, 6)
            }
        };
        SdcConfig {
            d: 2,
            m: 9,
            k,
            background,
            foregrounds,
            with_replacement: false,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            SdcError::Config(format!(
                "unknown preset {s:?}; available presets: {}",
                Preset::names().join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            p.config().validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let cfg = Preset::SynthAppendixD.config();
        assert_eq!((cfg.d, cfg.m, cfg.k), (2, 9, 3));
        assert_eq!(Preset::ErrorMode3.config().k, 6);
    }

    #[test]
    fn unknown_preset_lists_choices() {
        let err = "nope".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("synth-appdx-d") && err.contains("em3"), "{err}");
    }
}
