//! Regenerates the shipped synthetic benchmarks: `cargo run --example gen_data [dir]`.

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    if let Err(e) = pcp::synthetic::write_benchmarks(std::path::Path::new(&dir)) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
