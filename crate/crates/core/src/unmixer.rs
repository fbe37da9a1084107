//! Unmixing strategies behind one trait, looked up by name.

use serde::{Deserialize, Serialize};

use crate::classical::{fcls_cube, nmf_unmix};
use crate::cube::HyperCube;
use crate::endmember::EndmemberSet;
use crate::error::{Error, Result};
use crate::mixer::AbundanceMap;
use crate::neural::{self, UnmixerConfig, UnmixerState};
use crate::vca::vca_extract;

#[derive(Debug, Clone)]
pub struct UnmixOutput {
    pub abundances: AbundanceMap,
    pub endmembers: EndmemberSet,
    /// NMF residual per iteration, or RE per epoch for the network.
    pub trace: Vec<f64>,
    pub epochs: usize,
    /// Trained network, when the strategy has one.
    pub state: Option<UnmixerState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmixSettings {
    pub endmembers: usize,
    pub seed: u64,
    pub nmf_iterations: usize,
    /// `bands`, `endmembers` and `seed` are overwritten from the cube and
    /// the fields above.
    pub network: UnmixerConfig,
}

impl Default for UnmixSettings {
    fn default() -> Self {
        Self {
            endmembers: 3,
            seed: 0,
            nmf_iterations: 500,
            network: UnmixerConfig::default(),
        }
    }
}

pub trait Unmixer {
    fn name(&self) -> &'static str;

    /// `known` fixes the endmembers for strategies that accept them.
    fn unmix(&self, cube: &HyperCube, known: Option<&EndmemberSet>) -> Result<UnmixOutput>;
}

/// Abundances by constrained least squares; endmembers from `known` or VCA.
pub struct FclsUnmixer {
    pub endmembers: usize,
    pub seed: u64,
}

impl Unmixer for FclsUnmixer {
    fn name(&self) -> &'static str {
        "fcls"
    }

    fn unmix(&self, cube: &HyperCube, known: Option<&EndmemberSet>) -> Result<UnmixOutput> {
        let endmembers = match known {
            Some(m) => m.clone(),
            None => vca_extract(cube, self.endmembers, self.seed)?,
        };
        let abundances = fcls_cube(cube, &endmembers)?;
        Ok(UnmixOutput {
            abundances,
            endmembers,
            trace: Vec::new(),
            epochs: 0,
            state: None,
        })
    }
}

pub struct NmfUnmixer {
    pub endmembers: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Unmixer for NmfUnmixer {
    fn name(&self) -> &'static str {
        "nmf"
    }

    fn unmix(&self, cube: &HyperCube, _known: Option<&EndmemberSet>) -> Result<UnmixOutput> {
        let f = nmf_unmix(cube, self.endmembers, self.iterations, self.seed)?;
        Ok(UnmixOutput {
            abundances: f.abundance_map(cube.lines(), cube.samples())?,
            endmembers: f.endmember_set(cube.wavelengths().to_vec())?,
            epochs: f.objective_trace.len(),
            trace: f.objective_trace,
            state: None,
        })
    }
}

/// The patch autoencoder. Trains from scratch unless built from a state,
/// in which case that state is trained further up to `max_epochs`.
pub struct UnetUnmixer {
    pub config: UnmixerConfig,
    pub state: Option<UnmixerState>,
}

impl UnetUnmixer {
    pub fn from_state(state: UnmixerState) -> Self {
        Self {
            config: state.config.clone(),
            state: Some(state),
        }
    }
}

impl Unmixer for UnetUnmixer {
    fn name(&self) -> &'static str {
        "unet"
    }

    fn unmix(&self, cube: &HyperCube, known: Option<&EndmemberSet>) -> Result<UnmixOutput> {
        let mut cfg = self.config.clone();
        cfg.bands = cube.bands();
        if let Some(m) = known {
            cfg.reference_endmembers.get_or_insert_with(|| m.clone());
        }
        let state = match &self.state {
            Some(s) => s.clone(),
            None => neural::build(&cfg)?,
        };
        let (state, report) = neural::train(state, cube, &cfg)?;
        let (abundances, endmembers) = neural::infer(&state, cube)?;
        Ok(UnmixOutput {
            abundances,
            endmembers,
            trace: report.loss_trace.iter().map(|l| l.re).collect(),
            epochs: state.epoch,
            state: Some(state),
        })
    }
}

pub type Factory = fn(&UnmixSettings) -> Box<dyn Unmixer>;

pub struct Registry {
    entries: Vec<(&'static str, Factory)>,
}

impl Registry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a name, replacing any earlier entry with the same name.
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str, settings: &UnmixSettings) -> Result<Box<dyn Unmixer>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f(settings))
            .ok_or_else(|| Error::Unknown {
                kind: "unmixer",
                name: name.to_string(),
            })
    }
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("fcls", |s| {
            Box::new(FclsUnmixer {
                endmembers: s.endmembers,
                seed: s.seed,
            })
        });
        r.register("nmf", |s| {
            Box::new(NmfUnmixer {
                endmembers: s.endmembers,
                iterations: s.nmf_iterations,
                seed: s.seed,
            })
        });
        r.register("unet", |s| {
            let mut config = s.network.clone();
            config.endmembers = s.endmembers;
            config.seed = s.seed;
            Box::new(UnetUnmixer { config, state: None })
        });
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{even_wavelengths, Units};
    use ndarray::{Array2, Array3};

    fn mixture() -> (HyperCube, EndmemberSet) {
        let wl = even_wavelengths(6, 400.0, 900.0);
        let m = Array2::from_shape_fn((3, 6), |(e, b)| 0.1 + 0.3 * e as f64 + 0.05 * ((e + 1) * b) as f64 % 0.4);
        let mut x = Array3::zeros((6, 6, 6));
        for i in 0..6 {
            for j in 0..6 {
                let a = match (i + j) % 4 {
                    0 => [1.0, 0.0, 0.0],
                    1 => [0.0, 1.0, 0.0],
                    2 => [0.0, 0.0, 1.0],
                    _ => [0.2, 0.3, 0.5],
                };
                for b in 0..6 {
                    x[[i, j, b]] = (0..3).map(|e| a[e] * m[[e, b]]).sum();
                }
            }
        }
        (HyperCube::new(x, wl.clone(), Units::Reflectance).unwrap(), EndmemberSet::unnamed(wl, m).unwrap())
    }

    #[test]
    fn defaults_are_registered_by_name() {
        let r = Registry::default();
        assert_eq!(r.names(), vec!["fcls", "nmf", "unet"]);
        let s = UnmixSettings::default();
        for name in r.names() {
            assert_eq!(r.create(name, &s).unwrap().name(), name);
        }
        match r.create("pca", &s) {
            Err(Error::Unknown { kind, name }) => assert_eq!((kind, name.as_str()), ("unmixer", "pca")),
            other => panic!("expected unknown, got {:?}", other.err()),
        }
    }

    #[test]
    fn register_replaces() {
        let mut r = Registry::default();
        r.register("nmf", |s| {
            Box::new(FclsUnmixer {
                endmembers: s.endmembers,
                seed: s.seed,
            })
        });
        assert_eq!(r.names(), vec!["fcls", "unet", "nmf"]);
        assert_eq!(r.create("nmf", &UnmixSettings::default()).unwrap().name(), "fcls");
    }

    #[test]
    fn fcls_with_known_endmembers_is_exact() {
        let (cube, m) = mixture();
        let out = Registry::default().create("fcls", &UnmixSettings::default()).unwrap().unmix(&cube, Some(&m)).unwrap();
        let a = out.abundances.values[[1, 2, 0]];
        assert!((a - 0.2).abs() < 1e-9, "{a}");
    }

    #[test]
    fn nmf_reports_trace() {
        let (cube, _) = mixture();
        let s = UnmixSettings {
            nmf_iterations: 20,
            ..UnmixSettings::default()
        };
        let out = Registry::default().create("nmf", &s).unwrap().unmix(&cube, None).unwrap();
        assert_eq!(out.trace.len(), 20);
        assert_eq!(out.epochs, 20);
        assert_eq!(out.abundances.dim(), (6, 6, 3));
    }

    #[test]
    fn unet_trains_and_returns_state() {
        let (cube, _) = mixture();
        let s = UnmixSettings {
            network: UnmixerConfig {
                patch_size: 4,
                levels: 2,
                base_channels: 2,
                spectral_channels: 3,
                max_epochs: 2,
                batch_size: 2,
                ..UnmixerConfig::default()
            },
            seed: 3,
            ..UnmixSettings::default()
        };
        let out = Registry::default().create("unet", &s).unwrap().unmix(&cube, None).unwrap();
        let state = out.state.expect("state");
        assert_eq!(state.epoch, 2);
        assert_eq!(state.config.seed, 3);
        assert_eq!(out.trace.len(), 2);
        let resumed = UnetUnmixer::from_state(state).unmix(&cube, None).unwrap();
        assert_eq!(resumed.trace.len(), 0);
        assert_eq!(resumed.epochs, 2);
    }

    #[test]
    fn settings_json_round_trip() {
        let s = UnmixSettings::default();
        let back: UnmixSettings = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<UnmixSettings>(r#"{"endmember": 3}"#).is_err());
    }
}
