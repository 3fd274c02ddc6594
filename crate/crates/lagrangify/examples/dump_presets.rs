//! Regenerates the committed preset files from the built-in catalog.

use lagrangify::experiments::{BenchmarkPreset, PresetName};

fn main() {
    for name in PresetName::ALL {
        let path = format!("{}/presets/{name}.json", env!("CARGO_MANIFEST_DIR"));
        let mut json = BenchmarkPreset::builtin(name).to_json();
        json.push('\n');
        std::fs::write(&path, json).unwrap();
        println!("wrote {path}");
    }
}
