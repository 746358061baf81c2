//! Regenerates the bundled EU-LV-style feeder document:
//! `cargo run --release --example gen_feeder > scenarios/feeders/eu_lv_style.json`

fn main() {
    let doc = gridflex::feeder::synth::eu_lv_style(1);
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
}
