use arfm::delay::{apply_delay, revert_delay, TokenGrid};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = TokenGrid> {
    (1usize..=4, 1usize..=24, 2u32..=16).prop_flat_map(|(n, len, card)| {
        prop::collection::vec(0..card, n * len)
            .prop_map(move |cells| TokenGrid::new(n, len, card, cells).unwrap())
    })
}

proptest! {
    #[test]
    fn revert_is_left_inverse(g in grid()) {
        prop_assert_eq!(revert_delay(&apply_delay(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn delay_is_injective(a in grid(), b in grid()) {
        let (da, db) = (apply_delay(&a).unwrap(), apply_delay(&b).unwrap());
        prop_assert_eq!(a == b, da == db);
    }

    #[test]
    fn column_holds_earlier_frames_of_later_books(g in grid()) {
        let d = apply_delay(&g).unwrap();
        let n = g.n_books();
        for c in 0..d.len() {
            for b in 0..n {
                let id = d.get(b, c);
                if c >= b && c - b < g.len() {
                    prop_assert_eq!(id, g.get(b, c - b));
                } else {
                    prop_assert_eq!(id, g.pad());
                }
            }
        }
    }
}
