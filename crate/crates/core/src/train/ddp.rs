//! Data-parallel gradient averaging. Replicas are simulated in one process;
//! the averaging step is the only synchronization point.

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Gradients computed by one replica on a shard of `shard_size` examples.
pub struct ReplicaGrads<T> {
    pub grads: Grads<T>,
    pub shard_size: usize,
}

/// Element-wise mean of the replica gradients.
pub fn ddp_step_contract<T: Scalar>(replicas: Vec<ReplicaGrads<T>>, world_size: usize) -> Result<Grads<T>> {
    if replicas.len() != world_size || world_size == 0 {
        return Err(Error::Config(format!(
            "ddp: {} replica gradients for world size {world_size}",
            replicas.len()
        )));
    }
    let sizes: Vec<usize> = replicas.iter().map(|r| r.shard_size).collect();
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(Error::Data(format!("ddp: shard sizes differ across replicas {sizes:?}")));
    }
    let mut it = replicas.into_iter();
    let mut acc = it.next().expect("world_size >= 1").grads;
    if world_size == 1 {
        return Ok(acc);
    }
    for r in it {
        acc.accumulate(&r.grads);
    }
    acc.scale(T::from_f64(1.0 / world_size as f64));
    Ok(acc)
}
