use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Pooling reductions used by channel and spatial attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduce {
    /// `[C, H, W] -> [C, 1, 1]` mean over space.
    GlobalAvg,
    /// `[C, H, W] -> [C, 1, 1]` max over space.
    GlobalMax,
    /// `[C, H, W] -> [1, H, W]` mean over channels.
    ChannelAvg,
    /// `[C, H, W] -> [1, H, W]` max over channels.
    ChannelMax,
}

/// Output plus, for max reductions, the flat input index that produced each
/// output (first occurrence on ties).
pub fn reduce_with_argmax<T: Real>(input: &Tensor<T>, kind: Reduce) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3("reduce")?;
    let hw = h * w;
    let x = input.data();
    let mut arg = Vec::new();
    let out = match kind {
        Reduce::GlobalAvg => {
            let n = T::lit(hw as f64);
            let v = (0..c).map(|ch| input.channel(ch).iter().copied().sum::<T>() / n).collect();
            Tensor::from_parts(vec![c, 1, 1], v)
        }
        Reduce::GlobalMax => {
            let mut v = Vec::with_capacity(c);
            for ch in 0..c {
                let plane = input.channel(ch);
                let mut best = 0;
                for (i, &val) in plane.iter().enumerate() {
                    if val > plane[best] {
                        best = i;
                    }
                }
                arg.push(ch * hw + best);
                v.push(plane[best]);
            }
            Tensor::from_parts(vec![c, 1, 1], v)
        }
        Reduce::ChannelAvg => {
            let n = T::lit(c as f64);
            let mut v = vec![T::zero(); hw];
            for ch in 0..c {
                for (acc, &val) in v.iter_mut().zip(input.channel(ch)) {
                    *acc += val;
                }
            }
            v.iter_mut().for_each(|a| *a /= n);
            Tensor::from_parts(vec![1, h, w], v)
        }
        Reduce::ChannelMax => {
            let mut v = x[..hw].to_vec();
            arg = (0..hw).collect();
            for ch in 1..c {
                for (i, &val) in input.channel(ch).iter().enumerate() {
                    if val > v[i] {
                        v[i] = val;
                        arg[i] = ch * hw + i;
                    }
                }
            }
            Tensor::from_parts(vec![1, h, w], v)
        }
    };
    Ok((out, arg))
}

pub fn reduce<T: Real>(input: &Tensor<T>, kind: Reduce) -> Result<Tensor<T>> {
    Ok(reduce_with_argmax(input, kind)?.0)
}

pub(crate) fn reduce_backward<T: Real>(
    in_shape: &[usize],
    kind: Reduce,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let hw = h * w;
    let g = grad_out.data();
    let mut dx = vec![T::zero(); c * hw];
    match kind {
        Reduce::GlobalAvg => {
            let n = T::lit(hw as f64);
            for ch in 0..c {
                dx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = g[ch] / n);
            }
        }
        Reduce::ChannelAvg => {
            let n = T::lit(c as f64);
            for ch in 0..c {
                for i in 0..hw {
                    dx[ch * hw + i] = g[i] / n;
                }
            }
        }
        Reduce::GlobalMax | Reduce::ChannelMax => {
            for (&src, &gv) in argmax.iter().zip(g) {
                dx[src] += gv;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let x = Tensor::<f64>::full(vec![2, 3, 3], 1.5);
        assert!(reduce(&x, Reduce::GlobalAvg).unwrap().data().iter().all(|&v| v == 1.5));
        let y = Tensor::<f64>::from_f64(vec![3, 1, 1], &[1.0, 5.0, 3.0]).unwrap();
        assert_eq!(reduce(&y, Reduce::ChannelMax).unwrap().data(), &[5.0]);
        assert_eq!(reduce(&y, Reduce::ChannelAvg).unwrap().data(), &[3.0]);
    }

    #[test]
    fn max_ties_pick_first_index() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 4], &[2.0, 7.0, 7.0, 1.0]).unwrap();
        let (_, arg) = reduce_with_argmax(&x, Reduce::GlobalMax).unwrap();
        assert_eq!(arg, vec![1]);
    }
}
