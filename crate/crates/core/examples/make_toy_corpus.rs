//! Writes a synthetic GMB-style CSV: `make_toy_corpus <out.csv> [sentences] [seed]`.

use tagforge::synth::{synthetic_corpus, to_gmb_csv};

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next() else {
        eprintln!("usage: make_toy_corpus <out.csv> [sentences] [seed]");
        std::process::exit(2);
    };
    let n = args.next().map_or(200, |s| s.parse().expect("sentence count"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::write(&out, to_gmb_csv(&synthetic_corpus(n, seed))).expect("write corpus");
}
