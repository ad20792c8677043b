//! Central finite-difference verification of every tape op and loss.
//!
//! Each probe samples non-degenerate random points (away from relu/hinge
//! kinks and mining ties), evaluates the recorded graph as a scalar, and
//! compares analytic gradients against central differences with
//! `h = 1e-5 * max(1, |theta|)`.

use crate::autodiff::{Tape, Tensor, Value};
use crate::batching::PkConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    self, focal_prob, tape_batch_hard_hinge, tape_batch_hard_softplus, tape_focal_loss,
    tape_l_sht_full, tape_l_sht_sub, tape_pairwise_distances, tape_total_loss, LossConfig,
    DISTANCE_EPSILON,
};
use crate::model::{Arch, Model, ModelConfig};
use crate::rng::{RandomSource, SplitMix64};

/// Relative-error gate for every check.
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// One sampled check point: flat parameters plus a graph evaluator.
/// `eval(theta, true)` also returns the analytic gradient.
struct ProbePoint {
    theta: Vec<f64>,
    eval: Box<dyn Fn(&[f64], bool) -> Result<(f64, Vec<f64>)>>,
}

fn central_diff_max_rel_err(point: &ProbePoint) -> Result<f64> {
    let (_, analytic) = (point.eval)(&point.theta, true)?;
    let mut worst = 0.0f64;
    for k in 0..point.theta.len() {
        let h = 1e-5 * point.theta[k].abs().max(1.0);
        let mut plus = point.theta.clone();
        plus[k] += h;
        let mut minus = point.theta.clone();
        minus[k] -= h;
        let numeric = ((point.eval)(&plus, false)?.0 - (point.eval)(&minus, false)?.0) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn uniform_vec<R: RandomSource>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    (0..n).map(|_| rng.uniform_f64(lo, hi)).collect()
}

/// Scalarizes a tensor output as sum(out * w) for fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Value, weights: &[f64]) -> Result<Value> {
    let shape = tape.value(out).shape.clone();
    let w = tape.leaf(Tensor::new(shape, weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    tape.reduce_sum(prod)
}

/// Splits `theta` into tensors of the given shapes and inserts them as
/// leaves.
fn insert_leaves(tape: &mut Tape, theta: &[f64], shapes: &[Vec<usize>]) -> Vec<Value> {
    let mut leaves = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.clone(), theta[offset..offset + n].to_vec()).unwrap();
        leaves.push(tape.leaf(t));
        offset += n;
    }
    leaves
}

fn collect_grads(tape: &Tape, leaves: &[Value]) -> Vec<f64> {
    leaves.iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect()
}

/// Upper-triangle pairwise distances of row embeddings.
fn pair_dists(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let sq: f64 =
                rows[i].iter().zip(rows[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(sq.sqrt());
        }
    }
    out
}

/// True when all pairwise distances are separated by more than `gap`, so
/// hardest-pair selections cannot flip under the FD perturbation.
fn mining_is_stable(rows: &[Vec<f64>], gap: f64) -> bool {
    let mut d = pair_dists(rows);
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[0] > gap && d.windows(2).all(|w| w[1] - w[0] > gap)
}

fn sample_embeddings<R: RandomSource>(
    rng: &mut R,
    n: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    for _ in 0..1000 {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| uniform_vec(rng, dim, -1.5, 1.5)).collect::<Result<_>>()?;
        if mining_is_stable(&rows, 1e-3) {
            return Ok(rows);
        }
    }
    Err(Error::numeric("gradcheck: could not sample a non-degenerate embedding set"))
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

type PointBuilder = Box<dyn Fn(&mut SplitMix64) -> Result<ProbePoint>>;

fn probe_catalog() -> Vec<(&'static str, PointBuilder)> {
    let mut probes: Vec<(&'static str, PointBuilder)> = Vec::new();

    // Elementwise binary ops on 2x3 tensors; max keeps operands separated.
    for (name, kind) in
        [("add", 0u8), ("sub", 1), ("mul", 2), ("max", 3)]
    {
        probes.push((
            name,
            Box::new(move |rng| {
                let a = uniform_vec(rng, 6, -2.0, 2.0)?;
                let mut b = uniform_vec(rng, 6, -2.0, 2.0)?;
                if kind == 3 {
                    for (x, y) in a.iter().zip(b.iter_mut()) {
                        if (*x - *y).abs() < 5e-3 {
                            *y += 0.1;
                        }
                    }
                }
                let w = uniform_vec(rng, 6, -1.0, 1.0)?;
                let theta = [a, b].concat();
                Ok(ProbePoint {
                    theta,
                    eval: Box::new(move |theta, want_grad| {
                        let mut tape = Tape::new();
                        let shapes = vec![vec![2, 3], vec![2, 3]];
                        let leaves = insert_leaves(&mut tape, theta, &shapes);
                        let out = match kind {
                            0 => tape.add(leaves[0], leaves[1])?,
                            1 => tape.sub(leaves[0], leaves[1])?,
                            2 => tape.mul(leaves[0], leaves[1])?,
                            _ => tape.max(leaves[0], leaves[1])?,
                        };
                        let loss = weighted_sum(&mut tape, out, &w)?;
                        let value = tape.value(loss).item();
                        let grads = if want_grad {
                            tape.backward(loss)?;
                            collect_grads(&tape, &leaves)
                        } else {
                            Vec::new()
                        };
                        Ok((value, grads))
                    }),
                })
            }),
        ));
    }

    // Unary ops; domains keep log/sqrt well-conditioned and relu away
    // from its kink.
    for (name, kind) in [("exp", 0u8), ("log", 1), ("sqrt", 2), ("relu", 3)] {
        probes.push((
            name,
            Box::new(move |rng| {
                let x = match kind {
                    1 | 2 => uniform_vec(rng, 6, 0.2, 3.0)?,
                    3 => {
                        let mut v = uniform_vec(rng, 6, -2.0, 2.0)?;
                        for t in v.iter_mut() {
                            if t.abs() < 5e-3 {
                                *t += 0.1;
                            }
                        }
                        v
                    }
                    _ => uniform_vec(rng, 6, -2.0, 2.0)?,
                };
                let w = uniform_vec(rng, 6, -1.0, 1.0)?;
                Ok(ProbePoint {
                    theta: x,
                    eval: Box::new(move |theta, want_grad| {
                        let mut tape = Tape::new();
                        let leaves = insert_leaves(&mut tape, theta, &[vec![2, 3]]);
                        let out = match kind {
                            0 => tape.exp(leaves[0])?,
                            1 => tape.log(leaves[0])?,
                            2 => tape.sqrt(leaves[0])?,
                            _ => tape.relu(leaves[0])?,
                        };
                        let loss = weighted_sum(&mut tape, out, &w)?;
                        let value = tape.value(loss).item();
                        let grads = if want_grad {
                            tape.backward(loss)?;
                            collect_grads(&tape, &leaves)
                        } else {
                            Vec::new()
                        };
                        Ok((value, grads))
                    }),
                })
            }),
        ));
    }

    // Scalar-argument ops.
    for (name, kind) in [("add_scalar", 0u8), ("mul_scalar", 1), ("max_scalar", 2)] {
        probes.push((
            name,
            Box::new(move |rng| {
                let mut x = uniform_vec(rng, 6, -2.0, 2.0)?;
                let c = rng.uniform_f64(-1.0, 1.0)?;
                if kind == 2 {
                    for t in x.iter_mut() {
                        if (*t - c).abs() < 5e-3 {
                            *t += 0.1;
                        }
                    }
                }
                let w = uniform_vec(rng, 6, -1.0, 1.0)?;
                Ok(ProbePoint {
                    theta: x,
                    eval: Box::new(move |theta, want_grad| {
                        let mut tape = Tape::new();
                        let leaves = insert_leaves(&mut tape, theta, &[vec![6]]);
                        let out = match kind {
                            0 => tape.add_scalar(leaves[0], c)?,
                            1 => tape.mul_scalar(leaves[0], c)?,
                            _ => tape.max_scalar(leaves[0], c)?,
                        };
                        let loss = weighted_sum(&mut tape, out, &w)?;
                        let value = tape.value(loss).item();
                        let grads = if want_grad {
                            tape.backward(loss)?;
                            collect_grads(&tape, &leaves)
                        } else {
                            Vec::new()
                        };
                        Ok((value, grads))
                    }),
                })
            }),
        ));
    }

    probes.push((
        "matmul",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 3 * 4 + 4 * 2, -1.5, 1.5)?;
            let w = uniform_vec(rng, 6, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![3, 4], vec![4, 2]]);
                    let out = tape.matmul(leaves[0], leaves[1])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "add_bias",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 4 * 3 + 3, -2.0, 2.0)?;
            let w = uniform_vec(rng, 12, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![4, 3], vec![3]]);
                    let out = tape.add_bias(leaves[0], leaves[1])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "conv2d",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 2 * 2 * 4 * 4 + 3 * 2 * 9 + 3, -1.0, 1.0)?;
            let w = uniform_vec(rng, 2 * 3 * 4 * 4, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let shapes = vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]];
                    let leaves = insert_leaves(&mut tape, theta, &shapes);
                    let out = tape.conv2d(leaves[0], leaves[1], leaves[2])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "avgpool2d",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 2 * 3 * 4 * 4, -2.0, 2.0)?;
            let w = uniform_vec(rng, 2 * 3 * 2 * 2, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![2, 3, 4, 4]]);
                    let out = tape.avgpool2d(leaves[0])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "flatten",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 2 * 3 * 2 * 2, -2.0, 2.0)?;
            let w = uniform_vec(rng, 2 * 12, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![2, 3, 2, 2]]);
                    let out = tape.flatten(leaves[0])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "concat_rows",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 2 * 3 + 3 * 3, -2.0, 2.0)?;
            let w = uniform_vec(rng, 15, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![2, 3], vec![3, 3]]);
                    let out = tape.concat_rows(leaves[0], leaves[1])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "slice_rows",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 5 * 3, -2.0, 2.0)?;
            let w = uniform_vec(rng, 3 * 3, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![5, 3]]);
                    let out = tape.slice_rows(leaves[0], 1, 3)?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "gather_entries",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 10, -2.0, 2.0)?;
            let w = uniform_vec(rng, 4, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![10]]);
                    // Repeated index exercises gradient accumulation.
                    let out = tape.gather_entries(leaves[0], &[0, 3, 3, 7])?;
                    let loss = weighted_sum(&mut tape, out, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    for (name, mean) in [("reduce_sum", false), ("reduce_mean", true)] {
        probes.push((
            name,
            Box::new(move |rng| {
                let theta = uniform_vec(rng, 8, -2.0, 2.0)?;
                Ok(ProbePoint {
                    theta,
                    eval: Box::new(move |theta, want_grad| {
                        let mut tape = Tape::new();
                        let leaves = insert_leaves(&mut tape, theta, &[vec![8]]);
                        let loss = if mean {
                            tape.reduce_mean(leaves[0])?
                        } else {
                            tape.reduce_sum(leaves[0])?
                        };
                        let value = tape.value(loss).item();
                        let grads = if want_grad {
                            tape.backward(loss)?;
                            collect_grads(&tape, &leaves)
                        } else {
                            Vec::new()
                        };
                        Ok((value, grads))
                    }),
                })
            }),
        ));
    }

    probes.push((
        "softmax_cross_entropy",
        Box::new(|rng| {
            let theta = uniform_vec(rng, 4 * 3, -2.0, 2.0)?;
            let labels: Vec<usize> =
                (0..4).map(|_| rng.uniform_int(0, 2).map(|v| v as usize)).collect::<Result<_>>()?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![4, 3]]);
                    let loss = tape.softmax_cross_entropy(leaves[0], &labels)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "pairwise_distances",
        Box::new(|rng| {
            let rows = sample_embeddings(rng, 5, 3)?;
            let w = uniform_vec(rng, 25, -1.0, 1.0)?;
            Ok(ProbePoint {
                theta: flat(&rows),
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![5, 3]]);
                    let d = tape_pairwise_distances(&mut tape, leaves[0], DISTANCE_EPSILON)?;
                    let loss = weighted_sum(&mut tape, d, &w)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes
}

/// Loss probes as functions of raw embeddings (and logits for the
/// classification/total terms).
fn loss_catalog() -> Vec<(&'static str, PointBuilder)> {
    let labels4 = [0usize, 0, 1, 1];
    let mut probes: Vec<(&'static str, PointBuilder)> = Vec::new();

    probes.push((
        "triplet_vanilla",
        Box::new(|rng| {
            // Anchor/positive/negative rows; the hinge must stay active or
            // inactive across the FD step.
            let rows = loop {
                let rows = sample_embeddings(rng, 3, 3)?;
                let d_ap = pair_dists(&rows)[0];
                let d_an = pair_dists(&rows)[1];
                if (d_ap - d_an + 0.3).abs() > 5e-3 {
                    break rows;
                }
            };
            Ok(ProbePoint {
                theta: flat(&rows),
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![3, 3]]);
                    let d = tape_pairwise_distances(&mut tape, leaves[0], DISTANCE_EPSILON)?;
                    // d_ap = d[0][1], d_an = d[0][2].
                    let d_ap = tape.gather_entries(d, &[1])?;
                    let d_an = tape.gather_entries(d, &[2])?;
                    let diff = tape.sub(d_ap, d_an)?;
                    let shifted = tape.add_scalar(diff, 0.3)?;
                    let hinge = tape.max_scalar(shifted, 0.0)?;
                    let loss = tape.reduce_sum(hinge)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    for (name, hinge) in [("batch_hard_hinge", true), ("batch_hard_softplus", false)] {
        probes.push((
            name,
            Box::new(move |rng| {
                let rows = loop {
                    let rows = sample_embeddings(rng, 4, 3)?;
                    if !hinge {
                        break rows;
                    }
                    // Keep every anchor's hinge argument away from zero.
                    let d = losses::pairwise_distances(&rows);
                    let clear = (0..4).all(|a| {
                        let mut hp = f64::NEG_INFINITY;
                        let mut hn = f64::INFINITY;
                        for j in 0..4 {
                            if j != a && labels4[j] == labels4[a] {
                                hp = hp.max(d.get(a, j));
                            }
                            if labels4[j] != labels4[a] {
                                hn = hn.min(d.get(a, j));
                            }
                        }
                        (hp - hn + 0.3).abs() > 5e-3
                    });
                    if clear {
                        break rows;
                    }
                };
                Ok(ProbePoint {
                    theta: flat(&rows),
                    eval: Box::new(move |theta, want_grad| {
                        let mut tape = Tape::new();
                        let leaves = insert_leaves(&mut tape, theta, &[vec![4, 3]]);
                        let d =
                            tape_pairwise_distances(&mut tape, leaves[0], DISTANCE_EPSILON)?;
                        let loss = if hinge {
                            tape_batch_hard_hinge(&mut tape, d, &labels4, 0.3)?
                        } else {
                            tape_batch_hard_softplus(&mut tape, d, &labels4)?
                        };
                        let value = tape.value(loss).item();
                        let grads = if want_grad {
                            tape.backward(loss)?;
                            collect_grads(&tape, &leaves)
                        } else {
                            Vec::new()
                        };
                        Ok((value, grads))
                    }),
                })
            }),
        ));
    }

    probes.push((
        "l_sht_sub",
        Box::new(move |rng| {
            let re = sample_embeddings(rng, 4, 3)?;
            let bce = sample_embeddings(rng, 4, 3)?;
            let theta = [flat(&re), flat(&bce)].concat();
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![4, 3], vec![4, 3]]);
                    let loss = tape_l_sht_sub(
                        &mut tape,
                        leaves[0],
                        leaves[1],
                        &[0, 0, 1, 1],
                        DISTANCE_EPSILON,
                    )?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "l_sht_full",
        Box::new(move |rng| {
            let rows = sample_embeddings(rng, 8, 3)?;
            Ok(ProbePoint {
                theta: flat(&rows),
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![8, 3]]);
                    let (loss, _) = tape_l_sht_full(
                        &mut tape,
                        leaves[0],
                        &[0, 0, 1, 1, 0, 0, 1, 1],
                        DISTANCE_EPSILON,
                    )?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "focal_loss",
        Box::new(move |rng| {
            let rows = sample_embeddings(rng, 4, 3)?;
            Ok(ProbePoint {
                theta: flat(&rows),
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![4, 3]]);
                    let d = tape_pairwise_distances(&mut tape, leaves[0], DISTANCE_EPSILON)?;
                    let loss = tape_focal_loss(&mut tape, d, &[0, 0, 1, 1], 1.0, 2.0)?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "focal_prob",
        Box::new(move |rng| {
            let d = rng.uniform_f64(0.1, 5.0)?;
            let alpha = rng.uniform_f64(0.5, 2.0)?;
            Ok(ProbePoint {
                theta: vec![d],
                eval: Box::new(move |theta, _want_grad| {
                    let p = focal_prob(theta[0], alpha);
                    // Analytic: dp/dd = alpha (1-p)(1+p)/2.
                    let grad = 0.5 * alpha * (1.0 - p) * (1.0 + p);
                    Ok((p, vec![grad]))
                }),
            })
        }),
    ));

    probes.push((
        "classification_loss",
        Box::new(move |rng| {
            let theta = uniform_vec(rng, 8 * 3, -2.0, 2.0)?;
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![8, 3]]);
                    let loss =
                        tape.softmax_cross_entropy(leaves[0], &[0, 0, 1, 1, 0, 0, 1, 1])?;
                    let value = tape.value(loss).item();
                    let grads = if want_grad {
                        tape.backward(loss)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes.push((
        "total_loss",
        Box::new(move |rng| {
            let z = sample_embeddings(rng, 8, 3)?;
            let logits = uniform_vec(rng, 8 * 2, -2.0, 2.0)?;
            let theta = [flat(&z), logits].concat();
            Ok(ProbePoint {
                theta,
                eval: Box::new(move |theta, want_grad| {
                    let mut tape = Tape::new();
                    let leaves = insert_leaves(&mut tape, theta, &[vec![8, 3], vec![8, 2]]);
                    let (total, _) = tape_total_loss(
                        &mut tape,
                        leaves[0],
                        leaves[1],
                        &labels4,
                        4,
                        &LossConfig::default(),
                    )?;
                    let value = tape.value(total).item();
                    let grads = if want_grad {
                        tape.backward(total)?;
                        collect_grads(&tape, &leaves)
                    } else {
                        Vec::new()
                    };
                    Ok((value, grads))
                }),
            })
        }),
    ));

    probes
}

fn run_catalog(
    catalog: Vec<(&'static str, PointBuilder)>,
    seed: u64,
    points: usize,
) -> Result<Vec<CheckReport>> {
    let mut root = SplitMix64::new(seed);
    let mut out = Vec::new();
    for (name, builder) in catalog {
        let mut rng = root.fork();
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = builder(&mut rng)?;
            worst = worst.max(central_diff_max_rel_err(&point)?);
        }
        out.push(CheckReport { name: name.to_string(), points, max_rel_err: worst });
    }
    Ok(out)
}

/// Finite-difference checks for every primitive tape op.
pub fn run_primitive_checks(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    run_catalog(probe_catalog(), seed, points)
}

/// Finite-difference checks for every loss, from embeddings/logits in.
pub fn run_loss_checks(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    run_catalog(loss_catalog(), seed, points)
}

/// End-to-end check: a tiny conv model under the total loss, every
/// parameter compared against central differences.
pub fn run_full_model_check(seed: u64) -> Result<CheckReport> {
    let cfg = ModelConfig {
        arch: Arch::ConvSmall,
        embedding_dim: 4,
        num_classes: 2,
        input_h: 4,
        input_w: 4,
        input_c: 1,
    };
    let pk = PkConfig { p: 2, k: 3 };
    let b = pk.p * pk.k;
    let labels: Vec<usize> = (0..pk.p).flat_map(|i| std::iter::repeat_n(i, pk.k)).collect();

    let mut root = SplitMix64::new(seed);
    // Resample until mining selections are stable at this point.
    let (model, images) = loop {
        let mut rng = root.fork();
        let model = Model::init(cfg.clone(), &mut rng)?;
        let mut images = Vec::new();
        for _ in 0..2 * b {
            let mut img = Image::filled(4, 4, 1, 0.0)?;
            for v in img.data.iter_mut() {
                *v = rng.uniform_f64(0.0, 1.0)?;
            }
            images.push(img);
        }
        let refs: Vec<&Image> = images.iter().collect();
        let rows = model.embed_images(&refs)?;
        if mining_is_stable(&rows, 1e-4) {
            break (model, images);
        }
    };

    let theta0: Vec<f64> =
        model.params.iter().flat_map(|p| p.tensor.values.iter().copied()).collect();
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.tensor.shape.clone()).collect();
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let images_ref = images;
    let cfg_ref = cfg;
    let labels_ref = labels;

    let eval = move |theta: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut m = Model::zeros(cfg_ref.clone())?;
        let mut offset = 0;
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let p = m.param_mut(&names[i]).unwrap();
            p.tensor.values.copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let refs: Vec<&Image> = images_ref.iter().collect();
        let input = tape.leaf(m.images_to_input(&refs)?);
        let z = bound.embed(&mut tape, input)?;
        let logits = bound.classify(&mut tape, z)?;
        let (total, _) = tape_total_loss(
            &mut tape,
            z,
            logits,
            &labels_ref,
            images_ref.len() / 2,
            &LossConfig::default(),
        )?;
        let value = tape.value(total).item();
        let grads = if want_grad {
            tape.backward(total)?;
            collect_grads(&tape, &bound.leaves)
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let point = ProbePoint { theta: theta0, eval: Box::new(eval) };
    let worst = central_diff_max_rel_err(&point)?;
    Ok(CheckReport {
        name: "full_model_total_loss".to_string(),
        points: 1,
        max_rel_err: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for report in run_primitive_checks(11, 5).unwrap() {
            assert!(report.passed(), "{}: {}", report.name, report.max_rel_err);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for report in run_loss_checks(13, 5).unwrap() {
            assert!(report.passed(), "{}: {}", report.name, report.max_rel_err);
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let report = run_full_model_check(7).unwrap();
        assert!(report.passed(), "{}", report.max_rel_err);
    }
}
