//! 2D symbolic map rendering for prompts, notification snapshots and the
//! operator view.
//!
//! Rendering is a pure function of the scene and the canvas configuration;
//! the only state a [`Renderer`] keeps is the snapshot generation counter.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::Serialize;

use crate::model::{LabMap, MeepleColor, Point2D, RobotState, StationKind, ThermalZone, WorkerTrack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 800,
            height: 600,
            margin: 10,
        }
    }
}

/// What gets drawn.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub map: &'a LabMap,
    pub zones: &'a [ThermalZone],
    pub workers: &'a [WorkerTrack],
    pub robots: &'a [RobotState],
    /// Fire locations not tied to a monitored zone.
    pub fires: &'a [Point2D],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    GreyTriangle,
    YellowTriangle,
    RedTriangle,
    OrangeSquare,
    RedCircle,
    BlueCircle,
    GreenDot,
    BlackBar,
    PurpleDiamond,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LegendEntry {
    pub symbol: Symbol,
    pub meaning: &'static str,
}

pub const LEGEND: [(Symbol, &str); 9] = [
    (Symbol::GreyTriangle, "person, lab coat detected"),
    (Symbol::YellowTriangle, "person, lab coat not detected"),
    (Symbol::RedTriangle, "person, possible accident"),
    (Symbol::OrangeSquare, "mobile robot, labelled with its number"),
    (Symbol::RedCircle, "fire or temperature above the alarm threshold"),
    (Symbol::BlueCircle, "monitored hot spot below the alarm threshold"),
    (Symbol::GreenDot, "navigation node, labelled with its number"),
    (Symbol::BlackBar, "exit"),
    (Symbol::PurpleDiamond, "camera station"),
];

pub fn legend() -> Vec<LegendEntry> {
    LEGEND
        .iter()
        .map(|(symbol, meaning)| LegendEntry {
            symbol: *symbol,
            meaning,
        })
        .collect()
}

/// Legend sentence embedded into reposition prompts.
pub fn legend_text() -> String {
    "Symbols: triangles for people (grey = lab coat detected, yellow = lab coat not detected, \
     red = possible accident), orange squares for robots, red circles for fires, blue circles for \
     monitored hot spots below the alarm temperature with the temperature written above, green dots \
     for navigation nodes labelled with their numbers, black bars for exits, purple diamonds for \
     camera stations."
        .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Node,
    Exit,
    Station,
    Zone,
    Fire,
    Robot,
    Worker,
}

/// One drawn entity, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntityMark {
    pub kind: EntityKind,
    pub id: String,
    pub symbol: Symbol,
    pub pixel: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSnapshot {
    #[serde(skip)]
    pub image: Vec<u8>,
    pub legend: Vec<LegendEntry>,
    pub entities: Vec<EntityMark>,
    pub generation: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Renderer {
    config: RenderConfig,
    generation: u64,
}

impl Renderer {
    pub fn new(config: RenderConfig) -> Self {
        Self { config, generation: 0 }
    }

    pub fn config(&self) -> RenderConfig {
        self.config
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn render_2d(&mut self, scene: &Scene<'_>) -> MapSnapshot {
        let (image, entities) = render_png(scene, &self.config);
        self.generation += 1;
        MapSnapshot {
            image,
            legend: legend(),
            entities,
            generation: self.generation,
        }
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const EDGE: Rgb<u8> = Rgb([170, 200, 170]);
const NODE_GREEN: Rgb<u8> = Rgb([30, 160, 60]);
const LABEL_GREEN: Rgb<u8> = Rgb([10, 90, 30]);
const ORANGE: Rgb<u8> = Rgb([245, 140, 20]);
const FIRE_RED: Rgb<u8> = Rgb([220, 30, 30]);
const CALM_BLUE: Rgb<u8> = Rgb([40, 90, 220]);
const PURPLE: Rgb<u8> = Rgb([130, 60, 170]);
const MEEPLE_GREY: Rgb<u8> = Rgb([140, 140, 140]);
const MEEPLE_YELLOW: Rgb<u8> = Rgb([235, 200, 0]);
const MEEPLE_RED: Rgb<u8> = Rgb([210, 0, 0]);
const BORDER: Rgb<u8> = Rgb([90, 90, 90]);

struct Canvas {
    img: RgbImage,
    scale: f64,
    margin: f64,
    lab_height: f64,
}

impl Canvas {
    fn to_pixel(&self, p: &Point2D) -> (i32, i32) {
        let x = self.margin + p.x * self.scale;
        let y = self.margin + (self.lab_height - p.y) * self.scale;
        (x.round() as i32, y.round() as i32)
    }

    fn put(&mut self, x: i32, y: i32, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn fill_rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, c: Rgb<u8>) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    fn fill_circle(&mut self, cx: i32, cy: i32, r: i32, c: Rgb<u8>) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.put(cx + x, cy + y, c);
                }
            }
        }
    }

    fn fill_polygon(&mut self, pts: &[(i32, i32)], c: Rgb<u8>) {
        let (min_x, max_x) = (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.0).max().unwrap());
        let (min_y, max_y) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                if inside_convex(pts, x, y) {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn line(&mut self, a: (i32, i32), b: (i32, i32), c: Rgb<u8>) {
        let (mut x, mut y) = a;
        let dx = (b.0 - a.0).abs();
        let dy = -(b.1 - a.1).abs();
        let sx = if a.0 < b.0 { 1 } else { -1 };
        let sy = if a.1 < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.fill_rect(x, y, x + 1, y + 1, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Text with its top-left corner at (x, y), 5x7 glyphs scaled by `size`.
    fn text(&mut self, x: i32, y: i32, s: &str, size: i32, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            let ox = x + i as i32 * 6 * size;
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (0x10 >> rx) != 0 {
                        let px = ox + rx * size;
                        let py = y + ry as i32 * size;
                        self.fill_rect(px, py, px + size - 1, py + size - 1, c);
                    }
                }
            }
        }
    }

    fn text_centered(&mut self, cx: i32, y: i32, s: &str, size: i32, c: Rgb<u8>) {
        let w = s.chars().count() as i32 * 6 * size - size;
        self.text(cx - w / 2, y, s, size, c);
    }
}

fn inside_convex(pts: &[(i32, i32)], x: i32, y: i32) -> bool {
    let mut sign = 0i64;
    for i in 0..pts.len() {
        let (ax, ay) = pts[i];
        let (bx, by) = pts[(i + 1) % pts.len()];
        let cross = (bx - ax) as i64 * (y - ay) as i64 - (by - ay) as i64 * (x - ax) as i64;
        if cross != 0 {
            if sign == 0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn meeple_rgb(color: MeepleColor) -> (Rgb<u8>, Symbol) {
    match color {
        MeepleColor::Grey => (MEEPLE_GREY, Symbol::GreyTriangle),
        MeepleColor::Yellow => (MEEPLE_YELLOW, Symbol::YellowTriangle),
        MeepleColor::Red => (MEEPLE_RED, Symbol::RedTriangle),
    }
}

/// Robot position, interpolated along the edge it is traversing.
pub fn robot_position(map: &LabMap, robot: &RobotState) -> Point2D {
    let here = map.graph.position(robot.at_node).unwrap_or(Point2D::new(0.0, 0.0));
    let Some(next) = robot.path.first().and_then(|n| map.graph.position(*n)) else {
        return here;
    };
    let len = here.distance(&next);
    if len <= 0.0 {
        return here;
    }
    let f = (robot.progress / len).clamp(0.0, 1.0);
    Point2D::new(here.x + (next.x - here.x) * f, here.y + (next.y - here.y) * f)
}

/// Draws the scene and encodes it as PNG.
pub fn render_png(scene: &Scene<'_>, config: &RenderConfig) -> (Vec<u8>, Vec<EntityMark>) {
    let map = scene.map;
    let margin = config.margin as f64;
    let scale = ((config.width as f64 - 2.0 * margin) / map.width).min((config.height as f64 - 2.0 * margin) / map.height);
    let mut canvas = Canvas {
        img: RgbImage::from_pixel(config.width, config.height, WHITE),
        scale,
        margin,
        lab_height: map.height,
    };
    let mut marks = Vec::new();

    let (x0, y0) = canvas.to_pixel(&Point2D::new(0.0, map.height));
    let (x1, y1) = canvas.to_pixel(&Point2D::new(map.width, 0.0));
    canvas.line((x0, y0), (x1, y0), BORDER);
    canvas.line((x1, y0), (x1, y1), BORDER);
    canvas.line((x1, y1), (x0, y1), BORDER);
    canvas.line((x0, y1), (x0, y0), BORDER);

    for (a, b) in map.graph.edges() {
        if let (Some(pa), Some(pb)) = (map.graph.position(a), map.graph.position(b)) {
            let (pa, pb) = (canvas.to_pixel(&pa), canvas.to_pixel(&pb));
            canvas.line(pa, pb, EDGE);
        }
    }
    for (id, p) in map.graph.nodes() {
        let (x, y) = canvas.to_pixel(&p);
        canvas.fill_circle(x, y, 5, NODE_GREEN);
        canvas.text(x + 7, y + 5, &id.to_string(), 2, LABEL_GREEN);
        marks.push(EntityMark {
            kind: EntityKind::Node,
            id: id.to_string(),
            symbol: Symbol::GreenDot,
            pixel: (x, y),
        });
    }
    for (i, e) in map.exits.iter().enumerate() {
        let (x, y) = canvas.to_pixel(e);
        canvas.fill_rect(x - 9, y - 4, x + 9, y + 4, BLACK);
        marks.push(EntityMark {
            kind: EntityKind::Exit,
            id: format!("exit{}", i + 1),
            symbol: Symbol::BlackBar,
            pixel: (x, y),
        });
    }
    for s in &map.stations {
        let (x, y) = canvas.to_pixel(&s.position);
        canvas.fill_polygon(&[(x, y - 8), (x + 8, y), (x, y + 8), (x - 8, y)], PURPLE);
        let tag = match s.kind {
            StationKind::Rgbd => "RGBD",
            StationKind::Ir => "IR",
        };
        canvas.text(x + 10, y - 3, tag, 1, PURPLE);
        marks.push(EntityMark {
            kind: EntityKind::Station,
            id: s.id.clone(),
            symbol: Symbol::PurpleDiamond,
            pixel: (x, y),
        });
    }
    for z in scene.zones {
        let (x, y) = canvas.to_pixel(&z.position);
        let (color, symbol) = if z.alarmed {
            (FIRE_RED, Symbol::RedCircle)
        } else {
            (CALM_BLUE, Symbol::BlueCircle)
        };
        canvas.fill_circle(x, y, 10, color);
        if let Some(t) = z.current {
            canvas.text_centered(x, y - 28, &format!("{t:.1}"), 2, color);
        }
        marks.push(EntityMark {
            kind: EntityKind::Zone,
            id: z.id.clone(),
            symbol,
            pixel: (x, y),
        });
    }
    for (i, f) in scene.fires.iter().enumerate() {
        let (x, y) = canvas.to_pixel(f);
        canvas.fill_circle(x, y, 10, FIRE_RED);
        marks.push(EntityMark {
            kind: EntityKind::Fire,
            id: format!("fire{}", i + 1),
            symbol: Symbol::RedCircle,
            pixel: (x, y),
        });
    }
    for (i, r) in scene.robots.iter().enumerate() {
        let (x, y) = canvas.to_pixel(&robot_position(map, r));
        canvas.fill_rect(x - 9, y - 9, x + 9, y + 9, ORANGE);
        canvas.text_centered(x, y - 6, &(i + 1).to_string(), 2, BLACK);
        marks.push(EntityMark {
            kind: EntityKind::Robot,
            id: r.id.clone(),
            symbol: Symbol::OrangeSquare,
            pixel: (x, y),
        });
    }
    for w in scene.workers {
        let (x, y) = canvas.to_pixel(&w.position);
        let (color, symbol) = meeple_rgb(w.color());
        let outline = [(x, y - 13), (x + 12, y + 9), (x - 12, y + 9)];
        canvas.fill_polygon(&outline, BLACK);
        canvas.fill_polygon(&[(x, y - 9), (x + 9, y + 7), (x - 9, y + 7)], color);
        marks.push(EntityMark {
            kind: EntityKind::Worker,
            id: w.id.clone(),
            symbol,
            pixel: (x, y),
        });
    }

    let mut bytes = Vec::new();
    canvas
        .img
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("in-memory PNG encoding");
    (bytes, marks)
}

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0x00; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}
