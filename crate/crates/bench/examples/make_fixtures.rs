//! Regenerate the synthetic sample cases.
//!
//! `cargo run -p prompt-artisan-bench --example make_fixtures [DIR]`

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(prompt_artisan_bench::fixtures::shipped_cases_dir);
    for id in prompt_artisan_bench::fixtures::write_synthetic_cases(&dir)? {
        println!("{}", dir.join(id).display());
    }
    Ok(())
}
