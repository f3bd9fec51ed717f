//! The sparse input layer against its dense equivalent: same outputs and
//! weight gradients, a fraction of the work.

use std::time::Instant;

use deepctr::nn::{dense_fc_backward, dense_fc_forward, LayerParams};
use deepctr::sparse::{csr_from_rows, sparse_fc_backward, sparse_fc_forward};
use deepctr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> deepctr::Result<()> {
    let (dim, batch, out, nnz) = (20_000, 256, 64, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<(usize, f64)>> = (0..batch)
        .map(|_| {
            let mut idx = rand::seq::index::sample(&mut rng, dim, nnz).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| (j, 1.0)).collect()
        })
        .collect();
    let v = csr_from_rows(&rows, dim)?;
    let params = LayerParams::he_normal(&[dim, out], out, nnz, &mut rng);
    let g = Tensor::from_fn(&[batch, out], |_| rng.random_range(-1.0..1.0));

    let mut sp = params.clone();
    let t = Instant::now();
    let ys = sparse_fc_forward(&v, &sp)?;
    sparse_fc_backward(&v, &mut sp, &g)?;
    let sparse_ms = t.elapsed().as_secs_f64() * 1e3;

    let x = v.to_dense();
    let mut dp = params;
    let t = Instant::now();
    let yd = dense_fc_forward(&x, &dp)?;
    dense_fc_backward(&x, &mut dp, &g)?;
    let dense_ms = t.elapsed().as_secs_f64() * 1e3;

    let max_diff = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    println!("nnz {} of {} entries", v.nnz(), batch * dim);
    println!("output max diff {:e}", max_diff(&ys, &yd));
    println!(
        "weight grad max diff {:e}",
        max_diff(sp.grad_weights(), dp.grad_weights())
    );
    println!("sparse {:.2} ms, dense {:.2} ms", sparse_ms, dense_ms);
    Ok(())
}
