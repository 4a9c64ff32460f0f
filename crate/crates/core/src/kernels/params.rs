use super::matrix::Matrix;

/// A bundle of named trainable matrices.
///
/// Gradient buffers reuse the parameter type, so every block list returned by
/// `blocks` lines up with `blocks_mut` of a same-shaped value.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    p.blocks()
        .into_iter()
        .flat_map(|(_, m)| m.data().to_vec())
        .collect()
}

/// Overwrites the blocks of `p` from a flat slice produced by [`flatten`].
pub fn unflatten<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    for m in p.blocks_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len(), "flat parameter length");
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for m in z.blocks_mut() {
        m.fill(0.0);
    }
    z
}

pub fn accumulate<P: Parameters>(into: &mut P, from: &P) {
    let src = from.blocks();
    for (dst, (_, s)) in into.blocks_mut().into_iter().zip(src) {
        dst.add_assign(s);
    }
}

pub fn scale_all<P: Parameters>(p: &mut P, s: f64) {
    for m in p.blocks_mut() {
        m.scale(s);
    }
}
