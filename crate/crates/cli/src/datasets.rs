//! Known public and blueberry cubes. Only shapes are checked; files are
//! obtained and converted to ENVI by hand.

use hyperunmix::HyperCube;

use crate::config::DatasetDescriptor;
use crate::InputError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryEntry {
    pub name: &'static str,
    /// `[lines, samples, bands]`
    pub shape: [usize; 3],
    pub class_count: usize,
    pub note: &'static str,
}

pub const REGISTRY: [RegistryEntry; 6] = [
    RegistryEntry {
        name: "samson",
        shape: [95, 95, 156],
        class_count: 3,
        note: "soil, tree, water",
    },
    RegistryEntry {
        name: "apex",
        shape: [110, 110, 285],
        class_count: 4,
        note: "",
    },
    RegistryEntry {
        name: "dc-mall",
        shape: [1208, 307, 191],
        class_count: 7,
        note: "roofs, streets, paths, grass, trees, water, shadows",
    },
    RegistryEntry {
        name: "blueberry-1",
        shape: [3177, 1024, 224],
        class_count: 6,
        note: "train",
    },
    RegistryEntry {
        name: "blueberry-2",
        shape: [3047, 1024, 224],
        class_count: 6,
        note: "test",
    },
    RegistryEntry {
        name: "blueberry-3",
        shape: [2815, 1024, 224],
        class_count: 6,
        note: "validation",
    },
];

pub fn lookup(name: &str) -> Option<&'static RegistryEntry> {
    let key = name.to_ascii_lowercase().replace(['_', ' '], "-");
    REGISTRY.iter().find(|e| e.name == key)
}

pub fn expected_shape(d: &DatasetDescriptor) -> Option<[usize; 3]> {
    d.expected_shape.or_else(|| lookup(&d.name).map(|e| e.shape))
}

pub fn check_shape(d: &DatasetDescriptor, cube: &HyperCube) -> Result<(), InputError> {
    let got = [cube.lines(), cube.samples(), cube.bands()];
    match expected_shape(d) {
        Some(want) if want != got => Err(InputError(format!(
            "dataset {} expects shape {want:?}, cube is {got:?}",
            d.name
        ))),
        _ => Ok(()),
    }
}

pub fn table() -> String {
    let mut out = format!("{:<12} {:>6} {:>7} {:>5} {:>7}  note\n", "name", "lines", "samples", "bands", "classes");
    for e in &REGISTRY {
        out.push_str(&format!(
            "{:<12} {:>6} {:>7} {:>5} {:>7}  {}\n",
            e.name, e.shape[0], e.shape[1], e.shape[2], e.class_count, e.note
        ));
    }
    out
}
