use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene::Layout;

fn accumulate(acc: &mut Option<Grid>, term: Grid) -> Result<()> {
    match acc {
        None => *acc = Some(term),
        Some(g) => g.add_scaled(1.0, &term)?,
    }
    Ok(())
}

/// Writes denoised views back into the layer feature maps.
///
/// For each layer `k`, `f_k = Σ_n w_n move(α_{k,n} ⊙ v̂_n, −o_{k,n}) /
/// Σ_n w_n move(α_{k,n}, −o_{k,n})`, the minimizer of
/// `Σ_n w_n ‖v̂_n − Σ_k α_{k,n} ⊙ move(f_k, o_{k,n})‖²` for binary α. Pixels of
/// a layer that no view sees keep their value from `prev`.
pub fn solve_feature_update(
    views_hat: &[Grid],
    layouts: &[Layout],
    alphas: &[Vec<Grid>],
    weights: &[f64],
    prev: &[Grid],
) -> Result<Vec<Grid>> {
    let n = views_hat.len();
    if layouts.len() != n || alphas.len() != n || weights.len() != n {
        return Err(Error::param(format!(
            "count mismatch: {n} views, {} layouts, {} alpha sets, {} weights",
            layouts.len(),
            alphas.len(),
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::param("feature update needs at least one view"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::param(format!("view weights must be positive, got {w}")));
    }
    let layers = prev.len();
    for (layout, a) in layouts.iter().zip(alphas) {
        if layout.offsets.len() != layers || a.len() != layers {
            return Err(Error::param(format!(
                "every layout and alpha set needs {layers} entries"
            )));
        }
    }

    (0..layers)
        .map(|k| {
            let mut num: Option<Grid> = None;
            let mut den: Option<Grid> = None;
            for i in 0..n {
                let back = -layouts[i].offsets[k];
                let a = &alphas[i][k];
                let w = weights[i];
                let masked = views_hat[i].mul_plane(a)?.shifted(back);
                accumulate(&mut num, if w == 1.0 { masked } else { masked.scale(w) })?;
                let cover = a.shifted(back);
                accumulate(&mut den, if w == 1.0 { cover } else { cover.scale(w) })?;
            }
            let (num, den) = (num.expect("n > 0"), den.expect("n > 0"));
            let base = &prev[k];
            num.check_shape(base.shape())?;
            let pixels = base.shape().pixels();
            let mut out = base.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let d = den.data()[i % pixels];
                if d > 0.0 {
                    *v = num.data()[i] / d;
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Offset, Shape};

    #[test]
    fn single_view_projection() {
        let shape = Shape::new(2, 4, 4);
        let v = Grid::from_fn(shape, |c, x, y| (c * 16 + y * 4 + x) as f64);
        let prev = vec![Grid::filled(shape, -7.0), Grid::filled(shape, -8.0)];
        let fg = Grid::from_fn(shape.plane(), |_, x, y| if x < 2 && y < 2 { 1.0 } else { 0.0 });
        let bg = fg.map(|a| 1.0 - a);
        let out = solve_feature_update(
            std::slice::from_ref(&v),
            &[Layout::canonical(2)],
            &[vec![fg.clone(), bg]],
            &[1.0],
            &prev,
        )
        .unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let visible = fg.get(0, x, y) == 1.0;
                    assert_eq!(out[0].get(c, x, y), if visible { v.get(c, x, y) } else { -7.0 });
                    assert_eq!(out[1].get(c, x, y), if visible { -8.0 } else { v.get(c, x, y) });
                }
            }
        }
    }

    #[test]
    fn shifted_views_average_back_into_layer_frame() {
        let shape = Shape::new(1, 3, 1);
        let a = Grid::filled(shape.plane(), 1.0);
        let v1 = Grid::from_vec(shape, vec![1.0, 2.0, 3.0]).unwrap();
        let v2 = Grid::from_vec(shape, vec![10.0, 20.0, 30.0]).unwrap();
        let layouts = [Layout::new(vec![Offset::ZERO]), Layout::new(vec![Offset::new(1, 0)])];
        let out = solve_feature_update(
            &[v1, v2],
            &layouts,
            &[vec![a.clone()], vec![a.clone()]],
            &[1.0, 3.0],
            &[Grid::zeros(shape)],
        )
        .unwrap();
        // view 2 pixel x sees layer pixel x-1; move(alpha, -o) zero-fills its last column
        assert_eq!(out[0].data(), &[(1.0 + 3.0 * 20.0) / 4.0, (2.0 + 3.0 * 30.0) / 4.0, 3.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let shape = Shape::new(1, 2, 2);
        let g = Grid::zeros(shape);
        let a = vec![Grid::filled(shape.plane(), 1.0)];
        let l = Layout::canonical(1);
        assert!(solve_feature_update(&[g.clone()], &[l.clone()], &[a.clone()], &[0.0], &[g.clone()]).is_err());
        assert!(solve_feature_update(&[g.clone()], &[l.clone(), l.clone()], &[a.clone()], &[1.0], &[g.clone()]).is_err());
        assert!(solve_feature_update(&[], &[], &[], &[], &[g]).is_err());
    }
}
