use isp_core::mask::{Mask, Registry, RegistryEntry};
use isp_core::Error;
use proptest::collection::vec;
use proptest::prelude::*;

fn registry(n: usize) -> Registry {
    let k = n / 2;
    Registry::new(vec![
        RegistryEntry {
            name: "a.w".into(),
            shape: vec![1, k],
        },
        RegistryEntry {
            name: "b.w".into(),
            shape: vec![n - k],
        },
    ])
}

fn masks(count: usize) -> impl Strategy<Value = Vec<Mask>> {
    (2usize..300).prop_flat_map(move |n| {
        vec(vec(any::<bool>(), n), count).prop_map(move |bits| {
            let reg = registry(n);
            bits.iter()
                .map(|b| Mask::from_flat(&reg, b).unwrap())
                .collect()
        })
    })
}

fn naive_cosine(a: &[bool], b: &[bool]) -> f64 {
    let dot = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let na = a.iter().filter(|x| **x).count() as f64;
    let nb = b.iter().filter(|x| **x).count() as f64;
    dot / (na * nb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn union_and_intersection_laws(ms in masks(3)) {
        let (a, b, c) = (&ms[0], &ms[1], &ms[2]);
        prop_assert_eq!(a.union(b).unwrap(), b.union(a).unwrap());
        prop_assert_eq!(a.intersect(b).unwrap(), b.intersect(a).unwrap());
        prop_assert_eq!(
            a.union(b).unwrap().union(c).unwrap(),
            a.union(&b.union(c).unwrap()).unwrap()
        );
        prop_assert_eq!(
            a.intersect(b).unwrap().intersect(c).unwrap(),
            a.intersect(&b.intersect(c).unwrap()).unwrap()
        );
        prop_assert_eq!(&a.union(a).unwrap(), a);
        prop_assert_eq!(&a.intersect(a).unwrap(), a);
        prop_assert_eq!(
            a.union(b).unwrap().complement(),
            a.complement().intersect(&b.complement()).unwrap()
        );
        let i = a.intersect(b).unwrap();
        let u = a.union(b).unwrap();
        prop_assert!(i.is_subset(a).unwrap() && a.is_subset(&u).unwrap());
        prop_assert_eq!(i.kept() + u.kept(), a.kept() + b.kept());
    }

    #[test]
    fn cosine_matches_naive_and_is_bounded(ms in masks(2)) {
        let (a, b) = (&ms[0], &ms[1]);
        match a.cosine_similarity(b) {
            Ok(c) => {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
                prop_assert!((c - naive_cosine(&a.to_flat(), &b.to_flat())).abs() < 1e-12);
                prop_assert_eq!(c, b.cosine_similarity(a).unwrap());
                prop_assert!((a.cosine_similarity(a).unwrap() - 1.0).abs() < 1e-12);
                if a.intersect(b).unwrap().kept() == 0 {
                    prop_assert_eq!(c, 0.0);
                }
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::EmptyMask));
                prop_assert!(a.kept() == 0 || b.kept() == 0);
            }
        }
    }

    #[test]
    fn bytes_round_trip(ms in masks(1)) {
        let a = &ms[0];
        let reg = registry(a.total());
        prop_assert_eq!(&Mask::from_bytes(&a.to_bytes(), &reg).unwrap(), a);
    }
}

#[test]
fn half_overlap_cosine() {
    let reg = registry(4);
    let a = Mask::from_flat(&reg, &[true, true, false, false]).unwrap();
    let b = Mask::from_flat(&reg, &[true, false, true, false]).unwrap();
    assert!((a.cosine_similarity(&b).unwrap() - 0.5).abs() < 1e-12);
    let c = Mask::from_flat(&reg, &[false, false, true, true]).unwrap();
    assert_eq!(a.cosine_similarity(&c).unwrap(), 0.0);
}

#[test]
fn mismatched_registries_are_rejected() {
    let a = Mask::ones(&registry(4));
    let b = Mask::ones(&registry(6));
    assert!(a.union(&b).is_err());
    assert!(a.cosine_similarity(&b).is_err());
}
