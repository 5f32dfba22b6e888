use crate::geometry::Point2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexCoefficients {
    pub reflect: f64,
    pub expand: f64,
    pub contract: f64,
    pub shrink: f64,
}

impl Default for SimplexCoefficients {
    fn default() -> Self {
        Self { reflect: 1.0, expand: 2.0, contract: 0.5, shrink: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOutcome {
    pub best: Point2,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn lerp(a: Point2, b: Point2, t: f64) -> Point2 {
    Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
}

fn order(simplex: &mut [(Point2, f64); 3]) {
    simplex.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then(a.0.x.total_cmp(&b.0.x))
            .then(a.0.y.total_cmp(&b.0.y))
    });
}

fn diameter(simplex: &[(Point2, f64); 3]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            d = d.max(simplex[i].0.distance(&simplex[j].0));
        }
    }
    d
}

/// Two-dimensional Nelder–Mead from the given initial vertices. Stops once
/// the simplex diameter drops below `tolerance` or after `max_iterations`.
/// The returned vertex is never worse than the best initial vertex.
pub fn minimise<F: Fn(Point2) -> f64>(
    f: F,
    start: [Point2; 3],
    coeffs: SimplexCoefficients,
    tolerance: f64,
    max_iterations: usize,
) -> SimplexOutcome {
    let mut s = start.map(|p| (p, f(p)));
    order(&mut s);
    let mut iterations = 0;
    let mut converged = diameter(&s) < tolerance;
    while !converged && iterations < max_iterations {
        iterations += 1;
        let centroid = lerp(s[0].0, s[1].0, 0.5);
        let worst = s[2];
        let reflected = lerp(centroid, worst.0, -coeffs.reflect);
        let fr = f(reflected);
        if fr < s[0].1 {
            let expanded = lerp(centroid, worst.0, -coeffs.reflect * coeffs.expand);
            let fe = f(expanded);
            s[2] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < s[1].1 {
            s[2] = (reflected, fr);
        } else {
            let (candidate, fc, accept) = if fr < worst.1 {
                let c = lerp(centroid, reflected, coeffs.contract);
                let fc = f(c);
                (c, fc, fc <= fr)
            } else {
                let c = lerp(centroid, worst.0, coeffs.contract);
                let fc = f(c);
                (c, fc, fc < worst.1)
            };
            if accept {
                s[2] = (candidate, fc);
            } else {
                let best = s[0].0;
                for v in s.iter_mut().skip(1) {
                    let p = lerp(best, v.0, coeffs.shrink);
                    *v = (p, f(p));
                }
            }
        }
        order(&mut s);
        converged = diameter(&s) < tolerance;
    }
    SimplexOutcome { best: s[0].0, value: s[0].1, iterations, converged }
}
