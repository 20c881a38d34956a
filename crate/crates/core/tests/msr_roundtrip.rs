use msnerf::image_io::{decode_msr, default_bands, encode_msr, load_spectral_image, save_spectral_image, SpectralImage};
use proptest::prelude::*;

/// Every f32 bit pattern in [0, 1], subnormals included.
fn unit_f32() -> impl Strategy<Value = f32> {
    (0u32..=0x3f80_0000).prop_map(f32::from_bits)
}

fn image() -> impl Strategy<Value = SpectralImage> {
    (1usize..9, 1usize..9, prop::sample::select(vec![1usize, 3, 6, 12])).prop_flat_map(|(w, h, b)| {
        prop::collection::vec(unit_f32(), w * h * b)
            .prop_map(move |px| SpectralImage::new(w, h, default_bands(b), px).unwrap())
    })
}

proptest! {
    #[test]
    fn bytes_round_trip_bit_exactly(img in image()) {
        let back = decode_msr(&encode_msr(&img)).unwrap();
        prop_assert_eq!(back.bands(), img.bands());
        prop_assert_eq!((back.width(), back.height()), (img.width(), img.height()));
        let a: Vec<u32> = img.pixels().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.pixels().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reencoding_reproduces_the_file(img in image()) {
        let bytes = encode_msr(&img);
        prop_assert_eq!(encode_msr(&decode_msr(&bytes).unwrap()), bytes);
    }
}

#[test]
fn file_round_trip_keeps_values_that_8_bits_cannot_hold() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<f32> = (0..6 * 16).map(|k| k as f32 / 1000.0 + 1e-7).collect();
    let img = SpectralImage::new(4, 4, default_bands(6), px).unwrap();
    let path = dir.path().join("fine.msr");
    save_spectral_image(&img, &path).unwrap();
    let back = load_spectral_image(&path).unwrap();
    assert_eq!(back, img);
    // Distinct values closer together than 1/255 survive.
    assert_ne!(back.pixels()[0], back.pixels()[1]);
}
