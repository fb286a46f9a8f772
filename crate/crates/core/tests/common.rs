#![allow(dead_code)]

use std::path::PathBuf;

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/kitti_mini")
}

pub const FIXTURE_SIZE: (usize, usize) = (64, 208);
