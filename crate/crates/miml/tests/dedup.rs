use miml::codec::ImageJpeg;
use miml::dedup::{image_md5, DedupIndex, DedupOutcome};
use miml_core::image::ImageTensor;
use miml_core::phash::{hamming, phash};
use miml_core::synth::{generate, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n).map(|_| generate(&SceneConfig::square(128), &mut rng).image).collect()
}

fn recompress(image: &ImageTensor) -> ImageTensor {
    let codec = ImageJpeg;
    codec.decode(&codec.encode(image, 90)).unwrap()
}

#[test]
fn recompression_stays_within_radius() {
    let images = corpus(50);
    let close = images.iter().filter(|im| hamming(phash(im), phash(&recompress(im))) <= 4).count();
    assert!(close * 10 >= images.len() * 9, "{close} of {} within distance 4", images.len());
}

#[test]
fn unrelated_images_are_far_apart() {
    let images = corpus(50);
    let hashes: Vec<u64> = images.iter().map(phash).collect();
    let (mut far, mut total) = (0, 0);
    for i in 0..hashes.len() {
        for j in i + 1..hashes.len() {
            total += 1;
            far += (hamming(hashes[i], hashes[j]) > 10) as usize;
        }
    }
    assert!(far * 100 >= total * 95, "{far} of {total} pairs farther than 10");
}

#[test]
fn index_catches_exact_and_near_copies() {
    let images = corpus(3);
    let index = DedupIndex::default();
    assert_eq!(index.check_insert(&images[0]), DedupOutcome::Inserted);
    assert_eq!(index.check_insert(&images[0]), DedupOutcome::DuplicateMd5);
    assert!(matches!(index.check_insert(&recompress(&images[0])), DedupOutcome::NearDuplicate(d) if d <= 4));
    assert_eq!(index.check_insert(&images[1]), DedupOutcome::Inserted);
    assert_eq!(index.check_insert(&images[2]), DedupOutcome::Inserted);
    assert_eq!(index.len(), 3);
}

#[test]
fn md5_ignores_lossless_reencoding() {
    let image = corpus(1).remove(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    miml::io::save_image(&path, &image).unwrap();
    let reloaded = miml::io::load_image(&path).unwrap();
    assert_eq!(image_md5(&image), image_md5(&reloaded));
    assert_eq!(phash(&image), phash(&reloaded));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig { cases: 24, failure_persistence: None, ..Default::default() })]

    #[test]
    fn hash_distance_is_a_symmetric_zero_on_copies(seed in proptest::prelude::any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = generate(&SceneConfig::square(64), &mut rng).image;
        let b = generate(&SceneConfig::square(64), &mut rng).image;
        let (ha, hb) = (phash(&a), phash(&b));
        proptest::prop_assert_eq!(hamming(ha, phash(&a.clone())), 0);
        proptest::prop_assert_eq!(hamming(ha, hb), hamming(hb, ha));
        proptest::prop_assert!(hamming(ha, hb) <= 64);
    }
}
