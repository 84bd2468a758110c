use blocklab::scenegen::*;
fn main() {
    let s = SceneSpec {
        lower: BlockSpec::cube(1.2, [0.2, 0.3, 0.8], 0.0),
        upper: BlockSpec::cube(0.8, [0.85, 0.1, 0.1], 0.0),
        upper_offset: [0.0, 0.0],
        upper_height: 0.0,
        camera_azimuth: 0.0,
        rng_seed: 1,
    };
    let cfg = RenderConfig::default();
    let v = render_sequence(&s, 2, 32, 32, &cfg).unwrap();
    let f = &v.frames[0];
    for r in 0..32 {
        let mut line = String::new();
        for c in 0..32 {
            let p = f.pixel(r, c);
            let ch = if p[0] > p[2] + 0.05 { 'R' } else if p[2] > p[0] + 0.05 { 'B' } else if (p[0]-0.52).abs() < 0.02 && (p[1]-0.52).abs() < 0.02 { '.' } else { 'g' };
            line.push(ch);
        }
        println!("{line}");
    }
    // tipping sequence motion check
    let mut s2 = s.clone();
    s2.upper_offset = [0.95, 0.0];
    let v2 = render_sequence(&s2, 20, 32, 32, &cfg).unwrap();
    println!("label: {:?}", v2.label);
    for (i, w) in v2.frames.windows(2).enumerate() {
        let diff: f32 = w[0].data.iter().zip(&w[1].data).map(|(a, b)| (a - b).abs()).sum();
        println!("frame {}->{}: L1 diff {:.2}", i, i + 1, diff);
    }
}
