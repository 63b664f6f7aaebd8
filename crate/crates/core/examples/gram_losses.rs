//! The three pruning losses on a hand-sized pair of feature maps, with the
//! gradient of the joint loss flowing back into the pruned map.

use chanprune::losses::{self, LossSet, LossWeights};
use chanprune::{Tape, Tensor};

fn main() -> chanprune::Result<()> {
    let mut tape = Tape::new();
    // [B=1, M=2, H=2, Z=2]
    let base = tape.constant(Tensor::new([1, 2, 2, 2], vec![1., 2., 3., 4., 0., 1., 0., 1.])?);
    let pruned = tape.leaf(Tensor::new([1, 2, 2, 2], vec![1., 2., 3., 4., 0., 0., 0., 0.])?, true);
    let logits = tape.constant(Tensor::new([1, 3], vec![2.0, 0.5, -1.0])?);

    let flat = tape.reshape(pruned, &[1, 2, 4])?;
    let gf = tape.gram_feature(flat)?;
    let gs = tape.gram_spatial(flat)?;
    println!("feature Gram (M x M): {:?}", tape.value(gf).data());
    println!("spatial Gram (N x N): {:?}", tape.value(gs).data());

    let (total, parts) =
        losses::joint_loss_tape(&mut tape, base, pruned, logits, &[0], LossWeights::default(), LossSet::ALL)?;
    println!("L_r {:.6}  L_s {:.6}  L_c {:.6}  total {:.6}", parts.l_r, parts.l_s, parts.l_c, parts.total);
    tape.backward(total)?;
    println!("d total / d pruned map: {:?}", tape.grad(pruned).map(|g| g.data().to_vec()));
    Ok(())
}
