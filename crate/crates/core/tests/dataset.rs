mod common;

use proptest::prelude::*;

use phyc_core::dataset::{
    generate_grid, read_manifest, render_item, write_manifest, ConceptDataset, ConceptOptions,
    GridOptions, Transform, OBJECTS,
};

#[test]
fn grid_is_a_pure_function_of_its_options() {
    let a = common::corpus(2);
    let b = common::corpus(2);
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    let c = generate_grid(GridOptions {
        per_cell: 2,
        seed: 1,
        ..GridOptions::default()
    })
    .unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn grid_covers_every_cell() {
    let c = common::corpus(2);
    assert_eq!(c.images.len(), OBJECTS.len() * 7 * 2);
}

#[test]
fn manifest_roundtrip_preserves_hash() {
    let c = common::corpus(1);
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), &c).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(back.hash(), c.hash());
    assert_eq!(back, c);
}

#[test]
fn concept_dataset_is_deterministic_and_excludes_target_from_cross_set() {
    let c = common::corpus(2);
    let a = ConceptDataset::from_grid(&c, "ring", Transform::Burn, ConceptOptions::default(), 7)
        .unwrap();
    let b = ConceptDataset::from_grid(&c, "ring", Transform::Burn, ConceptOptions::default(), 7)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.physics_items.len(),
        ConceptOptions::default().cross_objects
    );
    assert!(a.physics_items.iter().all(|i| i.record.object != "ring"));
}

#[test]
fn unknown_object_is_rejected() {
    let c = common::corpus(1);
    assert!(
        ConceptDataset::from_grid(&c, "teapot", Transform::Melt, ConceptOptions::default(), 0)
            .is_err()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rendering_is_seed_deterministic_and_in_range(
        obj in 0..OBJECTS.len(),
        tf in proptest::option::of(0..6usize),
        severity in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let t = tf.map(|i| Transform::ALL[i]);
        let a = render_item(OBJECTS[obj], t, severity, seed, 16).unwrap();
        let b = render_item(OBJECTS[obj], t, severity, seed, 16).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
