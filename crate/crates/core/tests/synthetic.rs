use objdisc::evaluation::{corret, Averaging, SyntheticConfig};
use objdisc::matching::prefilter_neighbors;

#[test]
fn prefilter_separates_two_classes() {
    let ds = SyntheticConfig {
        n_images: 40,
        classes: 2,
        seed: 4,
        ..Default::default()
    }
    .generate();
    let n = prefilter_neighbors(&ds.descriptors(), 10);
    let r = corret(&n.to_map(), &ds.class_labels(), Averaging::Pooled).unwrap();
    println!("CorRet {:.1}", r.overall);
    assert!(r.overall >= 90.0, "{}", r.overall);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SyntheticConfig {
        n_images: 5,
        noise_level: 1.0,
        speckle: 0.2,
        seed: 9,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cfg.generate().write(a.path()).unwrap();
    cfg.generate().write(b.path()).unwrap();
    for im in 0..5 {
        for f in [
            format!("tensors/img{im:04}_relu5_3.npy"),
            format!("descriptors/img{im:04}.npy"),
        ] {
            assert_eq!(
                std::fs::read(a.path().join(&f)).unwrap(),
                std::fs::read(b.path().join(&f)).unwrap()
            );
        }
    }
}
