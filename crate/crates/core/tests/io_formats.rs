use gsvox::alignment::{EmbeddingBatch, Modality};
use gsvox::io::{
    decode_checkpoint, decode_embeddings, decode_grid, decode_pfm, decode_ply, decode_ppm, encode_checkpoint,
    encode_embeddings, encode_grid, encode_pfm, encode_ply, encode_ppm, EmbeddingTable, FloatImage, Image8, NamedArray,
    SceneManifest,
};
use gsvox::voxel::{grid_bounds, structure};
use gsvox::{Gaussian, GaussianCloud};
use proptest::prelude::*;

prop_compose! {
    /// Raw parameters, including ones no optimiser would produce.
    fn raw_gaussian()(
        p in prop::array::uniform3(-1e3f64..1e3),
        q in prop::array::uniform4(-1.0f64..1.0),
        s in prop::array::uniform3(-12.0f64..3.0),
        o in -20.0f64..20.0,
        c in prop::array::uniform3(-0.5f64..1.5),
    ) -> Gaussian {
        Gaussian { position: p.into(), rotation: q, log_scale: s.into(), opacity_logit: o, color: c.into() }
    }
}

fn cloud_bits(c: &GaussianCloud) -> Vec<u64> {
    c.iter().flat_map(|g| g.to_raw().map(f64::to_bits)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ply_round_trips_bitwise(gs in prop::collection::vec(raw_gaussian(), 0..40)) {
        let cloud = GaussianCloud::new(gs);
        let bytes = encode_ply(&cloud);
        let back = decode_ply(&bytes).unwrap();
        prop_assert_eq!(cloud_bits(&back), cloud_bits(&cloud));
        prop_assert_eq!(encode_ply(&back), bytes);
    }

    #[test]
    fn grid_round_trips_bitwise(gs in prop::collection::vec(raw_gaussian(), 8)) {
        let cloud = GaussianCloud::new(gs);
        let grid = structure(&cloud, &grid_bounds(&cloud).unwrap()).unwrap();
        let bytes = encode_grid(&grid);
        let back = decode_grid(&bytes).unwrap();
        prop_assert_eq!(&back.assignment, &grid.assignment);
        prop_assert_eq!(back.bounds, grid.bounds);
        prop_assert!(back.features.iter().zip(&grid.features).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_grid(&back), bytes);
    }

    #[test]
    fn images_round_trip_bitwise(
        w in 1usize..9,
        h in 1usize..9,
        three in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ppm = Image8 { width: w, height: h, data: (0..3 * w * h).map(|i| (seed >> (i % 57)) as u8 ^ i as u8).collect() };
        prop_assert_eq!(decode_ppm(&encode_ppm(&ppm)).unwrap(), ppm);
        let channels = if three { 3 } else { 1 };
        let data: Vec<f32> = (0..channels * w * h).map(|i| f32::from_bits((seed as u32).rotate_left(i as u32) & 0x7f7f_ffff)).collect();
        let pfm = FloatImage { width: w, height: h, channels, data };
        let bytes = encode_pfm(&pfm);
        let back = decode_pfm(&bytes).unwrap();
        prop_assert!(back.data.iter().zip(&pfm.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn checkpoint_round_trips_bitwise(
        shapes in prop::collection::vec((1usize..4, 1usize..4), 0..5),
        fill in -1e6f64..1e6,
    ) {
        let arrays: Vec<NamedArray> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(rows, cols))| NamedArray {
                name: format!("layer{i}.w"),
                rows,
                cols,
                data: (0..rows * cols).map(|k| fill / (k as f64 + 1.0)).collect(),
            })
            .collect();
        let bytes = encode_checkpoint(&arrays).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), arrays);
    }

    #[test]
    fn embeddings_round_trip_exactly(raw in prop::collection::vec(-1.0f64..1.0, 3 * 5)) {
        prop_assume!(raw.chunks(5).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let table = EmbeddingTable {
            ids: vec!["a".into(), "b".into(), "c".into()],
            batch: EmbeddingBatch::new(Modality::T, 5, raw).unwrap(),
        };
        let text = encode_embeddings(&table);
        let back = decode_embeddings(&text).unwrap();
        prop_assert_eq!(&back.ids, &table.ids);
        prop_assert_eq!(encode_embeddings(&back), text);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_ply(&bytes);
        let _ = decode_grid(&bytes);
        let _ = decode_ppm(&bytes);
        let _ = decode_pfm(&bytes);
        let _ = decode_checkpoint(&bytes);
        let text = String::from_utf8_lossy(&bytes);
        let _ = decode_embeddings(&text);
        let _ = SceneManifest::from_json(&text);
    }

    #[test]
    fn corrupted_headers_never_panic(gs in prop::collection::vec(raw_gaussian(), 8), at in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let cloud = GaussianCloud::new(gs);
        for mut bytes in [encode_ply(&cloud), encode_grid(&structure(&cloud, &grid_bounds(&cloud).unwrap()).unwrap())] {
            let i = at.index(bytes.len().min(300));
            bytes[i] = byte;
            let _ = decode_ply(&bytes);
            let _ = decode_grid(&bytes);
        }
    }
}
