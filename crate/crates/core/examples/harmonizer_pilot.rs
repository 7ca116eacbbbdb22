//! Planted-saliency pilot: trains one initial network with and without the
//! alignment term and prints the comparison as JSON.
//!
//! `cargo run --release -p itfit --example harmonizer_pilot > pilot.json`

use itfit::harmonizer::{planted_pilot, PilotSettings};

fn main() {
    let report = planted_pilot(&PilotSettings::default()).expect("pilot run");
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable report")
    );
}
