//! Shared domain vocabulary: shapes and colors, the token vocabulary, structured
//! prompts with their closed-grammar surface text, token grids and paired
//! records.
//!
//! Grids are serialized row-major: cell `(row, col)` is sequence position
//! `row * width + col`, and that order is the autoregressive generation order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = usize;

/// Maximum number of distinct objects a prompt may mention.
pub const MAX_OBJECTS: usize = 2;
/// Maximum number of spatial relations a prompt may carry.
pub const MAX_RELATIONS: usize = 1;
/// Maximum instance count of a single object.
pub const MAX_COUNT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::Above,
        RelationKind::Below,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn flipped(self) -> RelationKind {
        match self {
            RelationKind::LeftOf => RelationKind::RightOf,
            RelationKind::RightOf => RelationKind::LeftOf,
            RelationKind::Above => RelationKind::Below,
            RelationKind::Below => RelationKind::Above,
        }
    }

    pub fn words(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left of",
            RelationKind::RightOf => "right of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    /// Whether a subject at `subject` stands in this relation to an object at
    /// `object`; both are `(row, col)`.
    pub fn holds(self, subject: (usize, usize), object: (usize, usize)) -> bool {
        match self {
            RelationKind::LeftOf => subject.1 < object.1,
            RelationKind::RightOf => subject.1 > object.1,
            RelationKind::Above => subject.0 < object.0,
            RelationKind::Below => subject.0 > object.0,
        }
    }
}

/// Difference category of a prompt pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    OverallAppearance,
    Color,
    Counting,
    Position,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::OverallAppearance,
        Category::Color,
        Category::Counting,
        Category::Position,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::OverallAppearance => "overall_appearance",
            Category::Color => "color",
            Category::Counting => "counting",
            Category::Position => "position",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown category `{s}`")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenDef {
    Background,
    Object { shape: Shape, color: Color },
}

/// The image-token vocabulary and grid geometry.
///
/// Token 0 is the background; object tokens follow in shape-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct VocabSpec {
    grid_height: usize,
    grid_width: usize,
    shapes: Vec<Shape>,
    colors: Vec<Color>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    grid_height: usize,
    grid_width: usize,
    shapes: Vec<Shape>,
    colors: Vec<Color>,
}

impl TryFrom<VocabRecord> for VocabSpec {
    type Error = Error;

    fn try_from(r: VocabRecord) -> Result<Self> {
        VocabSpec::new(r.grid_height, r.grid_width, r.shapes, r.colors)
    }
}

impl From<VocabSpec> for VocabRecord {
    fn from(v: VocabSpec) -> Self {
        VocabRecord {
            grid_height: v.grid_height,
            grid_width: v.grid_width,
            shapes: v.shapes,
            colors: v.colors,
        }
    }
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec::new(4, 4, Shape::ALL.to_vec(), Color::ALL.to_vec()).expect("default vocab")
    }
}

impl VocabSpec {
    pub fn new(grid_height: usize, grid_width: usize, shapes: Vec<Shape>, colors: Vec<Color>) -> Result<Self> {
        if grid_height == 0 || grid_width == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if grid_height * grid_width < 4 {
            return Err(invalid("sequence length must be at least 4"));
        }
        if shapes.is_empty() || colors.is_empty() {
            return Err(invalid("vocabulary needs at least one shape and one color"));
        }
        let mut s = shapes.clone();
        s.sort();
        s.dedup();
        let mut c = colors.clone();
        c.sort();
        c.dedup();
        if s.len() != shapes.len() || c.len() != colors.len() {
            return Err(invalid("duplicate shape or color in vocabulary"));
        }
        Ok(VocabSpec {
            grid_height,
            grid_width,
            shapes,
            colors,
        })
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn colors(&self) -> &[Color] {
        &self.colors
    }

    pub fn seq_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.shapes.len() * self.colors.len()
    }

    pub fn tokens(&self) -> Vec<TokenDef> {
        let mut out = vec![TokenDef::Background];
        for &shape in &self.shapes {
            for &color in &self.colors {
                out.push(TokenDef::Object { shape, color });
            }
        }
        out
    }

    pub fn token_of(&self, shape: Shape, color: Color) -> Option<TokenId> {
        let s = self.shapes.iter().position(|&x| x == shape)?;
        let c = self.colors.iter().position(|&x| x == color)?;
        Some(1 + s * self.colors.len() + c)
    }

    pub fn token_def(&self, id: TokenId) -> Option<TokenDef> {
        if id == 0 {
            return Some(TokenDef::Background);
        }
        if id >= self.vocab_size() {
            return None;
        }
        let k = id - 1;
        Some(TokenDef::Object {
            shape: self.shapes[k / self.colors.len()],
            color: self.colors[k % self.colors.len()],
        })
    }

    /// Row-major sequence position of a cell.
    pub fn grid_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.grid_height || col >= self.grid_width {
            return Err(Error::Index {
                row,
                col,
                height: self.grid_height,
                width: self.grid_width,
            });
        }
        Ok(row * self.grid_width + col)
    }

    pub fn cell_of(&self, position: usize) -> (usize, usize) {
        (position / self.grid_width, position % self.grid_width)
    }

    /// Checks that a prompt only uses this vocabulary and fits on the grid.
    pub fn check_prompt(&self, spec: &PromptSpec) -> Result<()> {
        for o in &spec.objects {
            if self.token_of(o.shape, o.color).is_none() {
                return Err(invalid(format!(
                    "{} {} not in vocabulary",
                    o.color.word(),
                    o.shape.word()
                )));
            }
        }
        if spec.total_count() as usize > self.seq_len() {
            return Err(invalid("more object instances than grid cells"));
        }
        Ok(())
    }

    /// Stable content digest, used to tag remote reward requests.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("vocab serializes");
        crate::record::sha256_hex(json.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub count: u32,
}

impl ObjectSpec {
    pub fn new(shape: Shape, color: Color, count: u32) -> Self {
        ObjectSpec { shape, color, count }
    }

    pub fn phrase(&self) -> String {
        if self.count == 1 {
            format!("a {} {}", self.color.word(), self.shape.word())
        } else {
            format!("{} {} {}s", self.count, self.color.word(), self.shape.word())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub kind: RelationKind,
    pub object: usize,
}

/// A structured scene description with its rendered sentence and the integer
/// encoding the policy conditions on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PromptRecord")]
pub struct PromptSpec {
    objects: Vec<ObjectSpec>,
    relations: Vec<Relation>,
    category: Category,
    surface_text: String,
    prompt_tokens: Vec<usize>,
}

#[derive(Deserialize)]
struct PromptRecord {
    objects: Vec<ObjectSpec>,
    relations: Vec<Relation>,
    category: Category,
    surface_text: String,
    prompt_tokens: Vec<usize>,
}

impl TryFrom<PromptRecord> for PromptSpec {
    type Error = Error;

    fn try_from(r: PromptRecord) -> Result<Self> {
        let spec = PromptSpec::new(r.objects, r.relations, r.category)?;
        if spec.surface_text != r.surface_text || spec.prompt_tokens != r.prompt_tokens {
            return Err(invalid("stored surface text or encoding disagrees with the scene"));
        }
        Ok(spec)
    }
}

impl PromptSpec {
    pub fn new(objects: Vec<ObjectSpec>, relations: Vec<Relation>, category: Category) -> Result<Self> {
        validate_scene(&objects, &relations)?;
        let surface_text = render_text(&objects, &relations);
        let prompt_tokens = encode_scene(&objects, &relations);
        Ok(PromptSpec {
            objects,
            relations,
            category,
            surface_text,
            prompt_tokens,
        })
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn surface_text(&self) -> &str {
        &self.surface_text
    }

    pub fn prompt_tokens(&self) -> &[usize] {
        &self.prompt_tokens
    }

    pub fn total_count(&self) -> u32 {
        self.objects.iter().map(|o| o.count).sum()
    }

    pub fn with_category(&self, category: Category) -> PromptSpec {
        PromptSpec {
            category,
            ..self.clone()
        }
    }

    /// The template skeleton: object slots and which slots are related.
    /// Prompts with equal skeletons render through the same template.
    pub fn skeleton(&self) -> (usize, Vec<(usize, usize)>) {
        (
            self.objects.len(),
            self.relations.iter().map(|r| (r.subject, r.object)).collect(),
        )
    }

    /// Number of prompt fields (shape, color, count, relation kind) that differ,
    /// or `None` when the skeletons differ.
    pub fn field_diff(&self, other: &PromptSpec) -> Option<usize> {
        if self.skeleton() != other.skeleton() {
            return None;
        }
        let objects = self
            .objects
            .iter()
            .zip(&other.objects)
            .map(|(a, b)| {
                usize::from(a.shape != b.shape) + usize::from(a.color != b.color) + usize::from(a.count != b.count)
            })
            .sum::<usize>();
        let relations = self
            .relations
            .iter()
            .zip(&other.relations)
            .filter(|(a, b)| a.kind != b.kind)
            .count();
        Some(objects + relations)
    }
}

fn validate_scene(objects: &[ObjectSpec], relations: &[Relation]) -> Result<()> {
    if objects.is_empty() || objects.len() > MAX_OBJECTS {
        return Err(invalid(format!(
            "prompt needs 1..={MAX_OBJECTS} objects, got {}",
            objects.len()
        )));
    }
    if relations.len() > MAX_RELATIONS {
        return Err(invalid(format!("at most {MAX_RELATIONS} relations")));
    }
    for (i, o) in objects.iter().enumerate() {
        if o.count == 0 || o.count > MAX_COUNT {
            return Err(invalid(format!("object count must be in 1..={MAX_COUNT}")));
        }
        if objects[..i].iter().any(|p| p.shape == o.shape && p.color == o.color) {
            return Err(invalid("duplicate object description"));
        }
    }
    for r in relations {
        if r.subject >= objects.len() || r.object >= objects.len() {
            return Err(invalid("relation references a missing object"));
        }
        if r.subject == r.object {
            return Err(invalid("relation pairs an object with itself"));
        }
    }
    Ok(())
}

fn render_text(objects: &[ObjectSpec], relations: &[Relation]) -> String {
    let mut clauses = Vec::new();
    let mut mentioned = vec![false; objects.len()];
    for r in relations {
        clauses.push(format!(
            "{} {} {}",
            objects[r.subject].phrase(),
            r.kind.words(),
            objects[r.object].phrase()
        ));
        mentioned[r.subject] = true;
        mentioned[r.object] = true;
    }
    for (o, seen) in objects.iter().zip(&mentioned) {
        if !seen {
            clauses.push(o.phrase());
        }
    }
    clauses.join(" and ")
}

/// Layout of the fixed-length prompt encoding.
///
/// Each object slot is `[shape, color, count]`, each relation slot is
/// `[subject, kind, object]`; unused slots hold [`prompt_codec::PAD`].
pub mod prompt_codec {
    use super::*;

    pub const PAD: usize = 0;
    /// Fills every slot of the unconditional (null) prompt.
    pub const NULL: usize = 1;
    const SHAPE_BASE: usize = 2;
    const COLOR_BASE: usize = SHAPE_BASE + Shape::ALL.len();
    const COUNT_BASE: usize = COLOR_BASE + Color::ALL.len();
    const KIND_BASE: usize = COUNT_BASE + MAX_COUNT as usize;
    const INDEX_BASE: usize = KIND_BASE + RelationKind::ALL.len();

    pub const VOCAB: usize = INDEX_BASE + MAX_OBJECTS;
    pub const LEN: usize = 3 * MAX_OBJECTS + 3 * MAX_RELATIONS;

    pub fn null_prompt() -> Vec<usize> {
        vec![NULL; LEN]
    }

    pub(super) fn encode(objects: &[ObjectSpec], relations: &[Relation]) -> Vec<usize> {
        let mut out = vec![PAD; LEN];
        for (i, o) in objects.iter().enumerate() {
            out[3 * i] = SHAPE_BASE + o.shape.index();
            out[3 * i + 1] = COLOR_BASE + o.color.index();
            out[3 * i + 2] = COUNT_BASE + (o.count as usize - 1);
        }
        let base = 3 * MAX_OBJECTS;
        for (i, r) in relations.iter().enumerate() {
            out[base + 3 * i] = INDEX_BASE + r.subject;
            out[base + 3 * i + 1] = KIND_BASE + r.kind.index();
            out[base + 3 * i + 2] = INDEX_BASE + r.object;
        }
        out
    }

    fn slot<T: Copy>(token: usize, base: usize, values: &[T]) -> Result<T> {
        token
            .checked_sub(base)
            .and_then(|k| values.get(k).copied())
            .ok_or_else(|| invalid(format!("unexpected prompt token {token}")))
    }

    /// Inverse of the encoding; the category tag is not encoded.
    pub fn decode(tokens: &[usize]) -> Result<(Vec<ObjectSpec>, Vec<Relation>)> {
        if tokens.len() != LEN {
            return Err(Error::Shape {
                expected: LEN,
                actual: tokens.len(),
            });
        }
        let counts: Vec<u32> = (1..=MAX_COUNT).collect();
        let indices: Vec<usize> = (0..MAX_OBJECTS).collect();
        let mut objects = Vec::new();
        for i in 0..MAX_OBJECTS {
            let s = &tokens[3 * i..3 * i + 3];
            if s.iter().all(|&t| t == PAD) {
                continue;
            }
            objects.push(ObjectSpec {
                shape: slot(s[0], SHAPE_BASE, &Shape::ALL)?,
                color: slot(s[1], COLOR_BASE, &Color::ALL)?,
                count: slot(s[2], COUNT_BASE, &counts)?,
            });
        }
        let mut relations = Vec::new();
        let base = 3 * MAX_OBJECTS;
        for i in 0..MAX_RELATIONS {
            let s = &tokens[base + 3 * i..base + 3 * i + 3];
            if s.iter().all(|&t| t == PAD) {
                continue;
            }
            relations.push(Relation {
                subject: slot(s[0], INDEX_BASE, &indices)?,
                kind: slot(s[1], KIND_BASE, &RelationKind::ALL)?,
                object: slot(s[2], INDEX_BASE, &indices)?,
            });
        }
        validate_scene(&objects, &relations)?;
        Ok((objects, relations))
    }
}

fn encode_scene(objects: &[ObjectSpec], relations: &[Relation]) -> Vec<usize> {
    prompt_codec::encode(objects, relations)
}

/// Fixed-length integer encoding of a prompt; see [`prompt_codec`].
pub fn encode_prompt(spec: &PromptSpec) -> Vec<usize> {
    spec.prompt_tokens.clone()
}

/// A generated or ground-truth image: `height * width` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    tokens: Vec<TokenId>,
}

impl TokenGrid {
    pub fn new(vocab: &VocabSpec, tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.len() != vocab.seq_len() {
            return Err(Error::Shape {
                expected: vocab.seq_len(),
                actual: tokens.len(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.vocab_size()) {
            return Err(invalid(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.vocab_size()
            )));
        }
        Ok(TokenGrid {
            height: vocab.grid_height(),
            width: vocab.grid_width(),
            tokens,
        })
    }

    pub fn background(vocab: &VocabSpec) -> Self {
        TokenGrid {
            height: vocab.grid_height(),
            width: vocab.grid_width(),
            tokens: vec![0; vocab.seq_len()],
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> TokenId {
        self.tokens[row * self.width + col]
    }

    pub(crate) fn set(&mut self, position: usize, token: TokenId) {
        self.tokens[position] = token;
    }

    /// Cells `(row, col)` holding `token`, in row-major order.
    pub fn cells_with(&self, token: TokenId) -> Vec<(usize, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == token)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn diff_cells(&self, other: &TokenGrid) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

/// Two minimally different prompts with their ground-truth grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub prompt_1: PromptSpec,
    pub grid_1: TokenGrid,
    pub prompt_2: PromptSpec,
    pub grid_2: TokenGrid,
    pub category: Category,
    pub verified: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_circle_left_of_blue_square() -> PromptSpec {
        PromptSpec::new(
            vec![
                ObjectSpec::new(Shape::Circle, Color::Red, 1),
                ObjectSpec::new(Shape::Square, Color::Blue, 1),
            ],
            vec![Relation {
                subject: 0,
                kind: RelationKind::LeftOf,
                object: 1,
            }],
            Category::Position,
        )
        .unwrap()
    }

    #[test]
    fn default_vocab_dimensions() {
        let v = VocabSpec::default();
        assert_eq!(v.vocab_size(), 16);
        assert_eq!(v.seq_len(), 16);
        assert_eq!(v.tokens().len(), 16);
        assert_eq!(v.tokens()[0], TokenDef::Background);
        for id in 0..16 {
            match v.token_def(id).unwrap() {
                TokenDef::Background => assert_eq!(id, 0),
                TokenDef::Object { shape, color } => assert_eq!(v.token_of(shape, color), Some(id)),
            }
        }
        assert!(v.token_def(16).is_none());
    }

    #[test]
    fn tiny_grids_rejected() {
        assert!(VocabSpec::new(1, 3, Shape::ALL.to_vec(), Color::ALL.to_vec()).is_err());
        assert!(VocabSpec::new(2, 2, Shape::ALL.to_vec(), Color::ALL.to_vec()).is_ok());
    }

    #[test]
    fn grid_index_row_major() {
        let v = VocabSpec::default();
        assert_eq!(v.grid_index(0, 0).unwrap(), 0);
        assert_eq!(v.grid_index(1, 0).unwrap(), 4);
        assert!(matches!(v.grid_index(4, 0), Err(Error::Index { .. })));
        assert!(v.grid_index(0, 4).is_err());
        let mut seen = [false; 16];
        for r in 0..4 {
            for c in 0..4 {
                let i = v.grid_index(r, c).unwrap();
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(v.cell_of(i), (r, c));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn surface_text_templates() {
        assert_eq!(
            red_circle_left_of_blue_square().surface_text(),
            "a red circle left of a blue square"
        );
        let p = PromptSpec::new(
            vec![
                ObjectSpec::new(Shape::Triangle, Color::Green, 2),
                ObjectSpec::new(Shape::Square, Color::Yellow, 1),
            ],
            vec![],
            Category::Counting,
        )
        .unwrap();
        assert_eq!(p.surface_text(), "2 green triangles and a yellow square");
    }

    #[test]
    fn invalid_prompts_rejected() {
        let o = ObjectSpec::new(Shape::Circle, Color::Red, 1);
        let self_rel = Relation {
            subject: 0,
            kind: RelationKind::Above,
            object: 0,
        };
        assert!(PromptSpec::new(vec![o], vec![self_rel], Category::Position).is_err());
        let dangling = Relation {
            subject: 0,
            kind: RelationKind::Above,
            object: 1,
        };
        assert!(PromptSpec::new(vec![o], vec![dangling], Category::Position).is_err());
        assert!(PromptSpec::new(vec![], vec![], Category::Color).is_err());
        assert!(PromptSpec::new(vec![o, o], vec![], Category::Color).is_err());
        let too_many = ObjectSpec::new(Shape::Circle, Color::Red, MAX_COUNT + 1);
        assert!(PromptSpec::new(vec![too_many], vec![], Category::Counting).is_err());
    }

    #[test]
    fn color_change_touches_only_color_slot() {
        let a = red_circle_left_of_blue_square();
        let mut objects = a.objects().to_vec();
        objects[1].color = Color::Purple;
        let b = PromptSpec::new(objects, a.relations().to_vec(), a.category()).unwrap();
        let ea = encode_prompt(&a);
        let eb = encode_prompt(&b);
        let differing: Vec<usize> = (0..ea.len()).filter(|&i| ea[i] != eb[i]).collect();
        assert_eq!(differing, vec![4]);
        assert_eq!(ea, encode_prompt(&a.clone()));
        assert_eq!(a.field_diff(&b), Some(1));
    }

    #[test]
    fn null_prompt_is_not_a_valid_scene() {
        assert!(prompt_codec::decode(&prompt_codec::null_prompt()).is_err());
    }

    #[test]
    fn prompt_json_rejects_tampered_text() {
        let p = red_circle_left_of_blue_square();
        let json = serde_json::to_string(&p).unwrap();
        let back: PromptSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let tampered = json.replace("left of", "right of");
        assert!(serde_json::from_str::<PromptSpec>(&tampered).is_err());
    }

    #[test]
    fn grid_validation() {
        let v = VocabSpec::default();
        assert!(TokenGrid::new(&v, vec![0; 15]).is_err());
        assert!(TokenGrid::new(&v, vec![16; 16]).is_err());
        let g = TokenGrid::new(&v, (0..16).collect()).unwrap();
        assert_eq!(g.get(1, 2), 6);
        assert_eq!(g.cells_with(6), vec![(1, 2)]);
    }
}
