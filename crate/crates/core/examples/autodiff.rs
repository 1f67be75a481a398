//! Record a small computation on the tape, take its gradient, and compare
//! against central finite differences. Replaying with overridden leaves
//! re-evaluates the same graph at a new point.

use std::collections::BTreeMap;
use vidtune::tensor::{finite_diff, max_relative_error, record, Tensor, DEFAULT_FD_STEP};

fn main() -> vidtune::Result<()> {
    let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?;
    let w = Tensor::new(vec![2, 1], vec![0.3, -0.2])?;
    let b = Tensor::scalar(0.1);

    // loss = mean(tanh(x·w + b)²); x is data, so its gradient is exactly zero.
    let (loss, tape) = record(&[("x", x, false), ("w", w.clone(), true), ("b", b.clone(), true)], |t, v| {
        let xw = t.matmul(v[0], v[1])?;
        let bb = t.broadcast(v[2], &[3, 1])?;
        let h = t.add(xw, bb)?;
        let h = t.tanh(h)?;
        let sq = t.square(h)?;
        t.mean(sq)
    })?;
    println!("loss {:.6}, {} tape nodes", loss.item()?, tape.len());
    println!("primitives: {:?}", tape.primitive_counts());

    let grads = tape.grad(&Tensor::scalar(1.0))?;
    for (name, g) in grads.iter() {
        println!("d loss / d {name} = {:?}", g.data());
    }

    let leaves = BTreeMap::from([("w".to_string(), w), ("b".to_string(), b)]);
    let fd = finite_diff(|l| tape.replay(l), &leaves, DEFAULT_FD_STEP)?;
    for (name, reference) in &fd {
        let err = max_relative_error(grads.get(name).unwrap(), reference)?;
        println!("{name}: max relative error against finite differences {err:.2e}");
    }

    let moved = BTreeMap::from([("w".to_string(), Tensor::new(vec![2, 1], vec![1.0, 1.0])?)]);
    println!("replayed at w = [1, 1]: loss {:.6}", tape.replay(&moved)?.item()?);
    Ok(())
}
