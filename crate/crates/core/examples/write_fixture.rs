//! Regenerates the synthetic mini dataset: `cargo run --example write_fixture -- <dir>`.

use attnvo::fixture::{write_fixture, FixtureSpec};

fn main() -> attnvo::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixtures/kitti_mini".into());
    write_fixture(std::path::Path::new(&out), &FixtureSpec::default())
}
