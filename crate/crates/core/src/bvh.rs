//! BVH motion-capture text format: reader and writer.
//!
//! The reader mirrors the joint tree into a [`Skeleton`], converts the
//! per-joint Euler channels (degrees, applied in the listed order) to unit
//! quaternions, and converts `Frame Time` to frames per second. Translation
//! channels on non-root joints are parsed and ignored. An optional axis
//! remap and position scale bring data into the engine convention
//! (right-handed, Y up, +Z forward, meters).
//!
//! The writer emits ZYX rotation channels with 6-decimal fixed-point
//! values.

use crate::error::{Error, Result};
use crate::math::{mat_determinant, mat_mul, mat_mul_vec, mat_transpose, Mat3, Quat, Vec3};
use crate::skeleton::{Joint, MotionClip, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    XPos,
    YPos,
    ZPos,
    XRot,
    YRot,
    ZRot,
}

impl Channel {
    fn parse(s: &str, line: usize) -> Result<Channel> {
        match s {
            "Xposition" => Ok(Channel::XPos),
            "Yposition" => Ok(Channel::YPos),
            "Zposition" => Ok(Channel::ZPos),
            "Xrotation" => Ok(Channel::XRot),
            "Yrotation" => Ok(Channel::YRot),
            "Zrotation" => Ok(Channel::ZRot),
            other => Err(Error::parse(line, format!("unknown channel '{other}'"))),
        }
    }

    fn is_rotation(self) -> bool {
        matches!(self, Channel::XRot | Channel::YRot | Channel::ZRot)
    }

    fn axis(self) -> Vec3 {
        match self {
            Channel::XPos | Channel::XRot => [1.0, 0.0, 0.0],
            Channel::YPos | Channel::YRot => [0.0, 1.0, 0.0],
            Channel::ZPos | Channel::ZRot => [0.0, 0.0, 1.0],
        }
    }
}

/// Source-coordinate remap applied at parse time.
#[derive(Debug, Clone)]
pub struct ImportOptions {
    /// Proper rotation taking source axes to engine axes.
    pub axis_map: Mat3,
    /// Multiplies offsets and translations (e.g. 0.01 for centimeter data).
    pub position_scale: f64,
}

impl Default for ImportOptions {
    fn default() -> Self {
        ImportOptions {
            axis_map: crate::math::IDENTITY_MAT3,
            position_scale: 1.0,
        }
    }
}

impl ImportOptions {
    /// Builds an axis map from per-axis specs like `["x", "z", "-y"]`,
    /// meaning: engine x/y/z come from those source axes. The map must be a
    /// proper rotation (no handedness flip).
    pub fn from_axis_names(names: &[String; 3], position_scale: f64) -> Result<Self> {
        let mut m = [[0.0; 3]; 3];
        for (row, name) in names.iter().enumerate() {
            let (sign, axis) = match name.strip_prefix('-') {
                Some(rest) => (-1.0, rest),
                None => (1.0, name.as_str()),
            };
            let col = match axis {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                other => {
                    return Err(Error::invalid(format!("unknown axis '{other}' in axis map")))
                }
            };
            m[row][col] = sign;
        }
        if (mat_determinant(&m) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "axis map must be a proper rotation (determinant +1)",
            ));
        }
        if !(position_scale.is_finite() && position_scale > 0.0) {
            return Err(Error::invalid("position scale must be positive"));
        }
        Ok(ImportOptions {
            axis_map: m,
            position_scale,
        })
    }

    fn remap_vec(&self, v: Vec3) -> Vec3 {
        mat_mul_vec(&self.axis_map, v)
    }

    fn remap_quat(&self, q: &Quat) -> Quat {
        let r = mat_mul(
            &mat_mul(&self.axis_map, &q.to_matrix()),
            &mat_transpose(&self.axis_map),
        );
        Quat::from_matrix(&r)
    }
}

struct JointSpec {
    joint: Joint,
    channels: Vec<Channel>,
}

struct Lines<'a> {
    tokens: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let tokens = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        Lines { tokens, pos: 0 }
    }

    fn peek(&self) -> Option<&(usize, Vec<&'a str>)> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self, expected: &str) -> Result<(usize, &[&'a str])> {
        match self.tokens.get(self.pos) {
            Some((line, toks)) => {
                self.pos += 1;
                Ok((*line, toks))
            }
            None => Err(Error::parse(
                self.last_line(),
                format!("unexpected end of file, expected {expected}"),
            )),
        }
    }

    fn last_line(&self) -> usize {
        self.tokens.last().map(|(l, _)| *l).unwrap_or(0)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(line, format!("expected a number, got '{s}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value '{s}'")));
    }
    Ok(v)
}

fn parse_offset(tokens: &[&str], line: usize) -> Result<Vec3> {
    if tokens.len() != 4 || tokens[0] != "OFFSET" {
        return Err(Error::parse(line, "expected 'OFFSET x y z'"));
    }
    Ok([
        parse_f64(tokens[1], line)?,
        parse_f64(tokens[2], line)?,
        parse_f64(tokens[3], line)?,
    ])
}

fn parse_joint_block(
    lines: &mut Lines,
    name: String,
    parent: Option<usize>,
    specs: &mut Vec<JointSpec>,
) -> Result<()> {
    let (line, toks) = lines.next("'{'")?;
    if toks != ["{"] {
        return Err(Error::parse(line, "expected '{' after joint name"));
    }
    let (line, toks) = lines.next("OFFSET")?;
    let offset = parse_offset(&toks.to_vec(), line)?;

    let (line, toks) = lines.next("CHANNELS")?;
    if toks.len() < 2 || toks[0] != "CHANNELS" {
        return Err(Error::parse(line, "expected 'CHANNELS n ...'"));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| Error::parse(line, "invalid channel count"))?;
    if toks.len() != 2 + n {
        return Err(Error::parse(
            line,
            format!("CHANNELS declares {n} channels but lists {}", toks.len() - 2),
        ));
    }
    let channels = toks[2..]
        .iter()
        .map(|t| Channel::parse(t, line))
        .collect::<Result<Vec<_>>>()?;

    let index = specs.len();
    specs.push(JointSpec {
        joint: Joint {
            name,
            parent,
            offset,
            end_site: None,
        },
        channels,
    });

    loop {
        let (line, toks) = lines.next("'}' or JOINT or End Site")?;
        match toks {
            ["JOINT", child_name] => {
                let child = (*child_name).to_string();
                parse_joint_block(lines, child, Some(index), specs)?;
            }
            ["End", "Site"] => {
                let (line, toks) = lines.next("'{'")?;
                if toks != ["{"] {
                    return Err(Error::parse(line, "expected '{' after End Site"));
                }
                let (line, toks) = lines.next("OFFSET")?;
                let es = parse_offset(&toks.to_vec(), line)?;
                specs[index].joint.end_site = Some(es);
                let (line, toks) = lines.next("'}'")?;
                if toks != ["}"] {
                    return Err(Error::parse(line, "expected '}' closing End Site"));
                }
            }
            ["}"] => return Ok(()),
            _ => {
                return Err(Error::parse(
                    line,
                    format!("unexpected token '{}' in joint block", toks.join(" ")),
                ))
            }
        }
    }
}

/// Parses a BVH document into a skeleton and motion clip.
pub fn parse_bvh(text: &str, options: &ImportOptions) -> Result<(Skeleton, MotionClip)> {
    let mut lines = Lines::new(text);

    let (line, toks) = lines.next("HIERARCHY")?;
    if toks != ["HIERARCHY"] {
        return Err(Error::parse(line, "expected 'HIERARCHY' header"));
    }
    let (line, toks) = lines.next("ROOT")?;
    let root_name = match toks {
        ["ROOT", name] => (*name).to_string(),
        _ => return Err(Error::parse(line, "expected 'ROOT <name>'")),
    };
    let mut specs = Vec::new();
    parse_joint_block(&mut lines, root_name, None, &mut specs)?;

    let (line, toks) = lines.next("MOTION")?;
    if toks != ["MOTION"] {
        return Err(Error::parse(line, "expected 'MOTION' section"));
    }
    let (line, toks) = lines.next("Frames:")?;
    let frame_count: usize = match toks {
        ["Frames:", n] => n
            .parse()
            .map_err(|_| Error::parse(line, "invalid frame count"))?,
        _ => return Err(Error::parse(line, "expected 'Frames: <count>'")),
    };
    if frame_count == 0 {
        return Err(Error::parse(line, "frame count must be at least 1"));
    }
    let (line, toks) = lines.next("Frame Time:")?;
    let frame_time = match toks {
        ["Frame", "Time:", v] => parse_f64(v, line)?,
        _ => return Err(Error::parse(line, "expected 'Frame Time: <seconds>'")),
    };
    if frame_time <= 0.0 {
        return Err(Error::parse(line, "frame time must be positive"));
    }

    let total_channels: usize = specs.iter().map(|s| s.channels.len()).sum();
    let mut root_translation = Vec::with_capacity(frame_count);
    let mut rotations = Vec::with_capacity(frame_count);

    for _ in 0..frame_count {
        let (line, toks) = match lines.peek() {
            Some(_) => lines.next("frame data")?,
            None => {
                return Err(Error::parse(
                    lines.last_line(),
                    format!(
                        "MOTION section is truncated: expected {frame_count} frames, found {}",
                        rotations.len()
                    ),
                ))
            }
        };
        if toks.len() != total_channels {
            return Err(Error::parse(
                line,
                format!(
                    "frame has {} values but the hierarchy declares {total_channels} channels",
                    toks.len()
                ),
            ));
        }
        let values = toks
            .iter()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>>>()?;

        let mut cursor = 0;
        let mut frame_rots = Vec::with_capacity(specs.len());
        let mut frame_root = [0.0; 3];
        for (ji, spec) in specs.iter().enumerate() {
            let mut rot = Quat::IDENTITY;
            let mut pos = [0.0; 3];
            for ch in &spec.channels {
                let v = values[cursor];
                cursor += 1;
                if ch.is_rotation() {
                    let q = Quat::from_axis_angle_parts(ch.axis(), v.to_radians());
                    rot = rot.mul(&q);
                } else {
                    let axis = ch.axis();
                    for k in 0..3 {
                        pos[k] += axis[k] * v;
                    }
                }
            }
            if ji == 0 {
                frame_root = options.remap_vec([
                    pos[0] * options.position_scale,
                    pos[1] * options.position_scale,
                    pos[2] * options.position_scale,
                ]);
            }
            frame_rots.push(options.remap_quat(&rot.normalized()));
        }
        root_translation.push(frame_root);
        rotations.push(frame_rots);
    }
    if let Some((line, _)) = lines.peek() {
        return Err(Error::parse(
            *line,
            format!("extra data after the declared {frame_count} frames"),
        ));
    }

    let joints = specs
        .into_iter()
        .map(|s| Joint {
            offset: options.remap_vec([
                s.joint.offset[0] * options.position_scale,
                s.joint.offset[1] * options.position_scale,
                s.joint.offset[2] * options.position_scale,
            ]),
            end_site: s.joint.end_site.map(|e| {
                options.remap_vec([
                    e[0] * options.position_scale,
                    e[1] * options.position_scale,
                    e[2] * options.position_scale,
                ])
            }),
            ..s.joint
        })
        .collect();
    let skeleton = Skeleton::new(joints)?;
    let clip = MotionClip {
        fps: 1.0 / frame_time,
        root_translation,
        rotations,
    };
    clip.validate(&skeleton)?;
    Ok((skeleton, clip))
}

/// Intrinsic Z-Y-X Euler angles (radians) such that
/// `R = Rz(z) * Ry(y) * Rx(x)`.
fn euler_zyx(q: &Quat) -> (f64, f64, f64) {
    let m = q.to_matrix();
    let sy = -m[2][0];
    if sy.abs() > 1.0 - 1e-10 {
        // Gimbal lock: fold everything into z and x.
        let y = sy.clamp(-1.0, 1.0).asin();
        let z = (-m[0][1]).atan2(m[1][1]);
        (z, y, 0.0)
    } else {
        let y = sy.clamp(-1.0, 1.0).asin();
        let z = m[1][0].atan2(m[0][0]);
        let x = m[2][1].atan2(m[2][2]);
        (z, y, x)
    }
}

fn write_joint(
    out: &mut String,
    skeleton: &Skeleton,
    index: usize,
    children: &[Vec<usize>],
    depth: usize,
) {
    let indent = "  ".repeat(depth);
    let j = &skeleton.joints()[index];
    let keyword = if j.parent.is_none() { "ROOT" } else { "JOINT" };
    out.push_str(&format!("{indent}{keyword} {}\n{indent}{{\n", j.name));
    let inner = "  ".repeat(depth + 1);
    out.push_str(&format!(
        "{inner}OFFSET {:.6} {:.6} {:.6}\n",
        j.offset[0], j.offset[1], j.offset[2]
    ));
    if j.parent.is_none() {
        out.push_str(&format!(
            "{inner}CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation\n"
        ));
    } else {
        out.push_str(&format!(
            "{inner}CHANNELS 3 Zrotation Yrotation Xrotation\n"
        ));
    }
    for &c in &children[index] {
        write_joint(out, skeleton, c, children, depth + 1);
    }
    if children[index].is_empty() {
        let es = j.end_site.unwrap_or([0.0, 0.0, 0.0]);
        out.push_str(&format!(
            "{inner}End Site\n{inner}{{\n{inner}  OFFSET {:.6} {:.6} {:.6}\n{inner}}}\n",
            es[0], es[1], es[2]
        ));
    }
    out.push_str(&format!("{indent}}}\n"));
}

/// Serializes a clip as BVH text (ZYX rotation channels, degrees,
/// 6-decimal fixed point, meters).
pub fn write_bvh(skeleton: &Skeleton, clip: &MotionClip) -> Result<String> {
    clip.validate(skeleton)?;
    let n = skeleton.len();
    let mut children = vec![Vec::new(); n];
    for (i, j) in skeleton.joints().iter().enumerate() {
        if let Some(p) = j.parent {
            children[p].push(i);
        }
    }
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, skeleton, 0, &children, 0);
    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", clip.frames()));
    out.push_str(&format!("Frame Time: {:.6}\n", 1.0 / clip.fps));
    for t in 0..clip.frames() {
        let mut row: Vec<String> = Vec::with_capacity(3 + 3 * n);
        let rt = clip.root_translation[t];
        row.push(format!("{:.6}", rt[0]));
        row.push(format!("{:.6}", rt[1]));
        row.push(format!("{:.6}", rt[2]));
        for j in 0..n {
            let (z, y, x) = euler_zyx(&clip.rotations[t][j]);
            row.push(format!("{:.6}", z.to_degrees()));
            row.push(format!("{:.6}", y.to_degrees()));
            row.push(format!("{:.6}", x.to_degrees()));
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}
