//! BVH document parsing and serialization.
//!
//! Reads the HIERARCHY/MOTION layout with line-accurate syntax errors and
//! writes a canonical form: tab indentation, six-decimal floats, positions
//! before rotations on the root. A document produced by [`write_bvh`] parses
//! back to the same motion and re-serializes byte for byte.

use crate::error::{Error, Result};
use crate::math::{degrees_to_radians, radians_to_degrees, Axis, Quat, RotOrder, Vec3};
use crate::motion::{MotionSequence, Pose};
use crate::skeleton::{Joint, Skeleton};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Chan {
    Pos(Axis),
    Rot(Axis),
}

struct Cursor<'a> {
    toks: Vec<(usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Cursor<'a> {
        let toks: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        let last_line = toks.last().map_or(1, |t| t.0);
        Cursor { toks, pos: 0, last_line }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.toks.get(self.pos) {
            Some(&t) => {
                self.pos += 1;
                Ok(t)
            }
            None => Err(Error::BvhSyntax {
                line: self.last_line,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn expect(&mut self, word: &str) -> Result<usize> {
        let (line, tok) = self.next(word)?;
        if tok != word {
            return Err(Error::BvhSyntax {
                line,
                message: format!("expected '{word}', found '{tok}'"),
            });
        }
        Ok(line)
    }

    fn next_f64(&mut self, what: &str) -> Result<f64> {
        let (line, tok) = self.next(what)?;
        tok.parse::<f64>().map_err(|_| Error::BvhSyntax {
            line,
            message: format!("expected {what}, found '{tok}'"),
        })
    }

    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let (line, tok) = self.next(what)?;
        tok.parse::<usize>().map_err(|_| Error::BvhSyntax {
            line,
            message: format!("expected {what}, found '{tok}'"),
        })
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }
}

fn parse_channel(joint: &str, line: usize, tok: &str) -> Result<Chan> {
    match tok {
        "Xposition" => Ok(Chan::Pos(Axis::X)),
        "Yposition" => Ok(Chan::Pos(Axis::Y)),
        "Zposition" => Ok(Chan::Pos(Axis::Z)),
        "Xrotation" => Ok(Chan::Rot(Axis::X)),
        "Yrotation" => Ok(Chan::Rot(Axis::Y)),
        "Zrotation" => Ok(Chan::Rot(Axis::Z)),
        _ => Err(Error::BvhSyntax {
            line,
            message: format!("unknown channel '{tok}' on joint '{joint}'"),
        }),
    }
}

fn parse_joint(
    cur: &mut Cursor,
    name: String,
    parent: Option<usize>,
    joints: &mut Vec<Joint>,
    channels: &mut Vec<Vec<Chan>>,
) -> Result<()> {
    let my_index = joints.len();
    joints.push(Joint {
        name: name.clone(),
        parent,
        offset: Vec3::ZERO,
        rot_order: RotOrder::Zxy,
        end_site: None,
    });
    channels.push(Vec::new());

    cur.expect("{")?;
    cur.expect("OFFSET")?;
    let ox = cur.next_f64("offset value")?;
    let oy = cur.next_f64("offset value")?;
    let oz = cur.next_f64("offset value")?;
    joints[my_index].offset = Vec3::new(ox, oy, oz);

    cur.expect("CHANNELS")?;
    let count = cur.next_usize("channel count")?;
    let mut chans = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, tok) = cur.next("channel name")?;
        chans.push(parse_channel(&name, line, tok)?);
    }
    let rot_axes: Vec<Axis> = chans
        .iter()
        .filter_map(|c| match c {
            Chan::Rot(a) => Some(*a),
            Chan::Pos(_) => None,
        })
        .collect();
    let pos_count = chans.len() - rot_axes.len();
    let expected = if parent.is_none() {
        "three position and three rotation channels"
    } else {
        "exactly three rotation channels"
    };
    let shape_ok = if parent.is_none() {
        count == 6 && pos_count == 3
    } else {
        count == 3 && pos_count == 0
    };
    if !shape_ok {
        return Err(Error::UnsupportedChannels {
            joint: name,
            message: format!("expected {expected}, found {count} channels"),
        });
    }
    let order = RotOrder::from_axes(&rot_axes).ok_or_else(|| Error::UnsupportedChannels {
        joint: name.clone(),
        message: "rotation channels must name X, Y, and Z once each".into(),
    })?;
    if parent.is_none() {
        let mut seen = [false; 3];
        for c in &chans {
            if let Chan::Pos(a) = c {
                seen[*a as usize] = true;
            }
        }
        if seen != [true; 3] {
            return Err(Error::UnsupportedChannels {
                joint: name,
                message: "position channels must name X, Y, and Z once each".into(),
            });
        }
    }
    joints[my_index].rot_order = order;
    channels[my_index] = chans;

    loop {
        let (line, tok) = cur.next("'JOINT', 'End Site', or '}'")?;
        match tok {
            "JOINT" => {
                let (_, child) = cur.next("joint name")?;
                parse_joint(cur, child.to_string(), Some(my_index), joints, channels)?;
            }
            "End" => {
                cur.expect("Site")?;
                cur.expect("{")?;
                cur.expect("OFFSET")?;
                let ex = cur.next_f64("offset value")?;
                let ey = cur.next_f64("offset value")?;
                let ez = cur.next_f64("offset value")?;
                cur.expect("}")?;
                joints[my_index].end_site = Some(Vec3::new(ex, ey, ez));
            }
            "}" => return Ok(()),
            other => {
                return Err(Error::BvhSyntax {
                    line,
                    message: format!("expected 'JOINT', 'End Site', or '}}', found '{other}'"),
                })
            }
        }
    }
}

/// Parses a BVH document into a motion sequence. Root translation channels
/// populate the sequence's root positions; angles are converted from degrees.
pub fn parse_bvh(text: &str) -> Result<MotionSequence> {
    let mut cur = Cursor::new(text);
    cur.expect("HIERARCHY")?;
    cur.expect("ROOT")?;
    let (_, root_name) = cur.next("joint name")?;
    let mut joints = Vec::new();
    let mut channels: Vec<Vec<Chan>> = Vec::new();
    parse_joint(&mut cur, root_name.to_string(), None, &mut joints, &mut channels)?;

    cur.expect("MOTION")?;
    cur.expect("Frames:")?;
    let declared = cur.next_usize("frame count")?;
    cur.expect("Frame")?;
    let time_line = cur.expect("Time:")?;
    let frame_time = cur.next_f64("frame time")?;
    if !(frame_time.is_finite() && frame_time > 0.0) {
        return Err(Error::BvhSyntax {
            line: time_line,
            message: format!("frame time must be positive, found {frame_time}"),
        });
    }
    if declared == 0 {
        return Err(Error::BvhSyntax {
            line: time_line,
            message: "document declares zero frames".into(),
        });
    }

    let per_frame: usize = channels.iter().map(|c| c.len()).sum();
    let mut values = Vec::new();
    let mut last_value_line = time_line;
    while !cur.done() {
        let (line, tok) = cur.next("motion value")?;
        let v: f64 = tok.parse().map_err(|_| Error::BvhSyntax {
            line,
            message: format!("expected motion value, found '{tok}'"),
        })?;
        last_value_line = line;
        values.push(v);
    }
    if values.len() % per_frame != 0 {
        return Err(Error::BvhSyntax {
            line: last_value_line,
            message: format!(
                "motion data holds {} values, not a whole number of {}-value frames",
                values.len(),
                per_frame
            ),
        });
    }
    let actual = values.len() / per_frame;
    if actual != declared {
        return Err(Error::FrameCountMismatch { declared, actual });
    }

    let skeleton = Skeleton::new(joints)?;
    let mut frames = Vec::with_capacity(actual);
    let mut roots = Vec::with_capacity(actual);
    let mut idx = 0usize;
    for _ in 0..actual {
        let mut rotations = Vec::with_capacity(skeleton.joint_count());
        let mut root_pos = Vec3::ZERO;
        for (j, chans) in channels.iter().enumerate() {
            let mut axes = Vec::with_capacity(3);
            let mut angles = [0.0f64; 3];
            for c in chans {
                let v = values[idx];
                idx += 1;
                match c {
                    Chan::Pos(Axis::X) => root_pos.x = v,
                    Chan::Pos(Axis::Y) => root_pos.y = v,
                    Chan::Pos(Axis::Z) => root_pos.z = v,
                    Chan::Rot(a) => {
                        angles[axes.len()] = degrees_to_radians(v);
                        axes.push(*a);
                    }
                }
            }
            let order = skeleton.joints()[j].rot_order;
            debug_assert_eq!(RotOrder::from_axes(&axes), Some(order));
            rotations.push(Quat::from_euler(order, angles));
        }
        frames.push(Pose::new(rotations));
        roots.push(root_pos);
    }
    MotionSequence::new(skeleton, frames, roots, 1.0 / frame_time)
}

pub fn load_bvh(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path)?;
    parse_bvh(&text)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn rot_channel_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "Xrotation",
        Axis::Y => "Yrotation",
        Axis::Z => "Zrotation",
    }
}

fn write_joint(out: &mut String, sk: &Skeleton, children: &[Vec<usize>], j: usize, depth: usize, order: &mut Vec<usize>) {
    let joint = &sk.joints()[j];
    let tabs = "\t".repeat(depth);
    let kind = if joint.parent.is_none() { "ROOT" } else { "JOINT" };
    out.push_str(&format!("{tabs}{kind} {}\n{tabs}{{\n", joint.name));
    let inner = "\t".repeat(depth + 1);
    out.push_str(&format!(
        "{inner}OFFSET {} {} {}\n",
        fmt(joint.offset.x),
        fmt(joint.offset.y),
        fmt(joint.offset.z)
    ));
    let axes = joint.rot_order.axes();
    let rots = format!(
        "{} {} {}",
        rot_channel_name(axes[0]),
        rot_channel_name(axes[1]),
        rot_channel_name(axes[2])
    );
    if joint.parent.is_none() {
        out.push_str(&format!(
            "{inner}CHANNELS 6 Xposition Yposition Zposition {rots}\n"
        ));
    } else {
        out.push_str(&format!("{inner}CHANNELS 3 {rots}\n"));
    }
    order.push(j);
    if children[j].is_empty() {
        let end = joint.end_site.unwrap_or(Vec3::ZERO);
        out.push_str(&format!("{inner}End Site\n{inner}{{\n"));
        out.push_str(&format!(
            "{}OFFSET {} {} {}\n",
            "\t".repeat(depth + 2),
            fmt(end.x),
            fmt(end.y),
            fmt(end.z)
        ));
        out.push_str(&format!("{inner}}}\n"));
    } else {
        for &c in &children[j] {
            write_joint(out, sk, children, c, depth + 1, order);
        }
    }
    out.push_str(&format!("{tabs}}}\n"));
}

/// Serializes a motion sequence as a BVH document.
pub fn write_bvh(m: &MotionSequence) -> String {
    let sk = m.skeleton();
    let children = sk.children();
    let mut out = String::from("HIERARCHY\n");
    let mut order = Vec::with_capacity(sk.joint_count());
    write_joint(&mut out, sk, &children, sk.root_index(), 0, &mut order);
    out.push_str("MOTION\n");
    out.push_str(&format!("Frames: {}\n", m.frame_count()));
    out.push_str(&format!("Frame Time: {}\n", fmt(1.0 / m.fps())));
    for f in 0..m.frame_count() {
        let pose = &m.frames()[f];
        let mut vals = Vec::new();
        for &j in &order {
            let joint = &sk.joints()[j];
            if joint.parent.is_none() {
                let r = m.root_positions()[f];
                vals.push(fmt(r.x));
                vals.push(fmt(r.y));
                vals.push(fmt(r.z));
            }
            let angles = pose.rotation(j).to_euler(joint.rot_order);
            for a in angles {
                vals.push(fmt(radians_to_degrees(a)));
            }
        }
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_bvh(m: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_bvh(m))?;
    Ok(())
}
