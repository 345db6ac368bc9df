use ggsplat_core::hull::convex_hull;
use ggsplat_core::math::Vec3;
fn main() {
    let n: usize = std::env::args().nth(1).unwrap().parse().unwrap();
    let mut pts = Vec::new();
    // Fibonacci sphere: all points are hull vertices.
    let phi = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let t = phi * i as f64;
        pts.push(Vec3::new((t.cos() * r) as f32, y as f32, (t.sin() * r) as f32));
    }
    let t0 = std::time::Instant::now();
    let h = convex_hull(&pts).unwrap();
    println!("n={} vertices={} faces={} in {:?}", n, h.vertices.len(), h.faces.len(), t0.elapsed());
}
