#![no_main]

use libfuzzer_sys::fuzz_target;
use shrinkgp::kernel::{Covariance, KernelPool};
use nalgebra::DMatrix;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(pool) = KernelPool::from_json(s) else { return };
    assert_eq!(KernelPool::from_json(&pool.to_json().unwrap()).unwrap(), pool);
    // Evaluation must not panic; away from overflow it must also be finite.
    let x = DMatrix::from_fn(4, 2, |i, j| i as f64 * 0.5 - j as f64);
    for k in pool.members.iter().take(8) {
        let g = k.gram(&x, &x);
        if k.params().iter().all(|p| p.abs() < 1e50) {
            assert!(g.iter().all(|v| v.is_finite()), "{k:?}");
        }
    }
});
