#![allow(dead_code)]

use std::path::Path;

use dvp_core::bank::ThemeBank;
use dvp_core::engine::EngineConfig;
use dvp_core::layout::GridSpec;
use dvp_core::raster::RasterImage;

/// A 64×64 image: a base colour with a few coloured blocks placed by `i`.
pub fn pattern(i: u32) -> RasterImage {
    let mut img = RasterImage::filled(64, 64, [(40 + i * 23 % 180) as u8, (200 - i * 11 % 150) as u8, (90 + i * 37 % 140) as u8]);
    for b in 0..3u32 {
        let x = (i * 13 + b * 21) % 48;
        let y = (i * 7 + b * 17) % 48;
        let rgb = [((i + b) * 71 % 256) as u8, ((i * 3 + b) * 53 % 256) as u8, ((i + 2 * b) * 97 % 256) as u8];
        for yy in y..y + 16 {
            for xx in x..x + 16 {
                img.put_pixel(xx, yy, rgb);
            }
        }
    }
    img
}

pub fn write_images(dir: &Path, count: u32, offset: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        pattern(i + offset)
            .save_png(&dir.join(format!("img{:02}.png", i)))
            .unwrap();
    }
}

pub fn bank(dir: &Path, count: u32) -> ThemeBank {
    write_images(dir, count, 0);
    ThemeBank::create(dir, "fixture").unwrap()
}

/// Small cells keep the tests fast.
pub fn small_config(seed: u64) -> EngineConfig {
    EngineConfig {
        grid: GridSpec::default_grid_px(32),
        seed,
        ..EngineConfig::default()
    }
}
