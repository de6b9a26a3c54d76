use super::{same_shape, InstanceMap, Raster};
use crate::error::{Error, Result};

/// Groups foreground cells into instances from a centerness heatmap and a
/// per-cell offset field (`offset[0]` = Δx along rows, `offset[1]` = Δy
/// along columns, metres). `resolution` is the cell size in metres.
///
/// Centres are 8-neighbourhood local maxima above `center_thresh`, kept
/// greedily in descending order (row-major index breaks ties) unless within
/// `nms_radius` of an already kept centre. Each foreground cell joins the
/// centre nearest to `cell + offset`; cells farther than `2·nms_radius` from
/// every centre become background.
pub fn decode_instances(
    centerness: &Raster<f64>,
    offset: &[Raster<f64>; 2],
    seg: &Raster<bool>,
    center_thresh: f64,
    nms_radius: f64,
    resolution: f64,
) -> Result<InstanceMap> {
    same_shape("decode_instances", centerness, seg)?;
    same_shape("decode_instances", centerness, &offset[0])?;
    same_shape("decode_instances", centerness, &offset[1])?;
    if !(resolution > 0.0) || nms_radius < 0.0 {
        return Err(Error::config("decode needs a positive resolution and non-negative nms radius"));
    }
    let (rows, cols) = (centerness.rows, centerness.cols);
    let c = &centerness.data;
    let mut cands: Vec<usize> = (0..rows * cols)
        .filter(|&i| {
            let v = c[i];
            if !(v > center_thresh) {
                return false;
            }
            let (r, q) = ((i / cols) as isize, (i % cols) as isize);
            (-1..=1).all(|dr| {
                (-1..=1).all(|dq| {
                    let (rr, qq) = (r + dr, q + dq);
                    if (dr, dq) == (0, 0) || rr < 0 || qq < 0 || rr >= rows as isize || qq >= cols as isize {
                        return true;
                    }
                    v >= c[rr as usize * cols + qq as usize]
                })
            })
        })
        .collect();
    cands.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));

    let pos = |i: usize| (((i / cols) as f64) * resolution, ((i % cols) as f64) * resolution);
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for i in cands {
        let (x, y) = pos(i);
        if centers.iter().all(|&(cx, cy)| (x - cx).hypot(y - cy) > nms_radius) {
            centers.push((x, y));
        }
    }

    let cutoff = 2.0 * nms_radius;
    let mut labels = vec![0u32; rows * cols];
    for i in (0..rows * cols).filter(|&i| seg.data[i]) {
        let (x, y) = pos(i);
        let (tx, ty) = (x + offset[0].data[i], y + offset[1].data[i]);
        let mut best: Option<(usize, f64)> = None;
        for (k, &(cx, cy)) in centers.iter().enumerate() {
            let d = (tx - cx).hypot(ty - cy);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        if let Some((k, d)) = best {
            if d <= cutoff {
                labels[i] = k as u32 + 1;
            }
        }
    }
    Ok(InstanceMap::canonical(Raster {
        rows,
        cols,
        data: labels,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_peak_takes_the_blob() {
        let (rows, cols) = (5, 5);
        let mut cen = Raster::filled(rows, cols, 0.0);
        cen.data[12] = 0.9;
        let zeros = Raster::filled(rows, cols, 0.0);
        let seg = Raster::new(rows, cols, (0..25).map(|i| (6..=18).contains(&i)).collect()).unwrap();
        let m = decode_instances(&cen, &[zeros.clone(), zeros], &seg, 0.5, 2.0, 1.0).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.foreground(), seg);
    }

    #[test]
    fn below_threshold_is_empty() {
        let cen = Raster::filled(3, 3, 0.2);
        let z = Raster::filled(3, 3, 0.0);
        let seg = Raster::filled(3, 3, true);
        let m = decode_instances(&cen, &[z.clone(), z], &seg, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn plateau_keeps_first_row_major_cell() {
        let cen = Raster::new(1, 3, vec![0.8, 0.8, 0.1]).unwrap();
        let z = Raster::filled(1, 3, 0.0);
        let seg = Raster::new(1, 3, vec![true, true, false]).unwrap();
        let m = decode_instances(&cen, &[z.clone(), z], &seg, 0.5, 1.5, 1.0).unwrap();
        assert_eq!(m.0.data, vec![1, 1, 0]);
    }
}
