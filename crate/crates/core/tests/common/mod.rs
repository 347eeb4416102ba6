#![allow(dead_code)]

use memseg::data_io::{Image, TextureFamily};
use memseg::encoder::EncoderConfig;
use memseg::network::{ModelConfig, SegModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::Toy {
            widths: [4, 8, 8, 8],
            seed: 5,
        },
        image_size: size,
        decoder_widths: [8, 8, 4, 4],
        ca_reduction: 4,
        memory_size: 3,
        ..ModelConfig::default()
    }
}

pub fn normals(n: usize, size: usize, family: u64) -> Vec<Image> {
    let fam = TextureFamily::new(size, family);
    let mut rng = ChaCha8Rng::seed_from_u64(family + 100);
    (0..n).map(|_| fam.sample(&mut rng)).collect()
}

pub fn tiny_model(size: usize) -> SegModel {
    SegModel::build(tiny_config(size), &normals(6, size, 1), 3).unwrap()
}
