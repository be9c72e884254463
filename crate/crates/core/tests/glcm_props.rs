use proptest::prelude::*;

use ctforensics::glcm::{glcm, quantize_value, LevelMap};

fn naive(map: &LevelMap, (a, b): (i32, i32), g: usize) -> Vec<u32> {
    let mut m = vec![0u32; g * g];
    for y in 0..map.height as i64 {
        for x in 0..map.width as i64 {
            let (nx, ny) = (x + a as i64, y + b as i64);
            if nx < 0 || ny < 0 || nx >= map.width as i64 || ny >= map.height as i64 {
                continue;
            }
            let g1 = map.levels[(y * map.width as i64 + x) as usize] as usize;
            let g2 = map.levels[(ny * map.width as i64 + nx) as usize] as usize;
            m[g1 * g + g2] += 1;
        }
    }
    m
}

fn level_map(max_side: usize, g: u16) -> impl Strategy<Value = LevelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0..g, h * w).prop_map(move |levels| LevelMap {
            height: h,
            width: w,
            levels,
        })
    })
}

proptest! {
    #[test]
    fn counts_match_a_direct_loop(map in level_map(12, 7), a in -4i32..=4, b in -4i32..=4) {
        prop_assert_eq!(glcm(&map, (a, b), 7).unwrap(), naive(&map, (a, b), 7));
    }

    #[test]
    fn total_is_the_number_of_in_bounds_pairs(map in level_map(12, 5), a in -13i32..=13, b in -13i32..=13) {
        let total: u64 = glcm(&map, (a, b), 5).unwrap().iter().map(|&c| c as u64).sum();
        let pairs = map.width.saturating_sub(a.unsigned_abs() as usize)
            * map.height.saturating_sub(b.unsigned_abs() as usize);
        prop_assert_eq!(total, pairs as u64);
    }

    #[test]
    fn opposite_offsets_transpose(map in level_map(10, 6), a in -3i32..=3, b in -3i32..=3) {
        let fwd = glcm(&map, (a, b), 6).unwrap();
        let back = glcm(&map, (-a, -b), 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                prop_assert_eq!(fwd[i * 6 + j], back[j * 6 + i]);
            }
        }
    }

    #[test]
    fn quantized_levels_stay_below_100(p in 0.0f32..=1.0) {
        let q = quantize_value(p).unwrap();
        prop_assert!(q <= 99);
        prop_assert!((q as f32 - p * 100.0).abs() <= 1.0);
    }
}

#[test]
fn levels_at_or_above_g_are_rejected() {
    let map = LevelMap {
        height: 2,
        width: 2,
        levels: vec![0, 1, 2, 3],
    };
    assert!(glcm(&map, (1, 0), 3).is_err());
    assert!(glcm(&map, (1, 0), 4).is_ok());
}

#[test]
fn out_of_range_probabilities_are_rejected() {
    assert!(quantize_value(-0.01).is_err());
    assert!(quantize_value(1.01).is_err());
    assert!(quantize_value(f32::NAN).is_err());
    assert_eq!(quantize_value(1.0).unwrap(), 99);
    assert_eq!(quantize_value(0.994).unwrap(), 99);
    assert_eq!(quantize_value(0.0).unwrap(), 0);
}
