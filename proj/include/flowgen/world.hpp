#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowgen/image.hpp"
#include "flowgen/rng.hpp"

#include "json.hpp"

namespace flowgen::world {

// ---------------------------------------------------------------------------
// Scene model: 4x4 cell grid over a 32x32 canvas, 8x8 pixels per cell.
// ---------------------------------------------------------------------------

constexpr int kGrid = 4;
constexpr int kCell = 8;
constexpr int kShapes = 3;
constexpr int kColors = 6;
constexpr float kBackground = 51.0f / 255.0f;

enum class Shape : int { circle = 0, square = 1, triangle = 2 };
enum class Color : int { red = 0, green = 1, blue = 2, yellow = 3, magenta = 4, cyan = 5 };

const char* shape_name(Shape s);
const char* color_name(Color c);
std::array<float, 3> color_rgb(Color c);

struct ObjectSpec {
  Shape shape;
  Color color;
  int row = 0;
  int col = 0;
  bool operator==(const ObjectSpec&) const = default;
};

struct GlyphSpec {
  std::string text;  // 1..3 uppercase letters
  int row = 0;       // anchor cell; letters occupy (row, col..col+len-1)
  int col = 0;
  bool operator==(const GlyphSpec&) const = default;
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  std::optional<GlyphSpec> glyphs;

  bool valid(std::string* why = nullptr) const;
  void normalize();  // sort objects by (row, col) for canonical comparison
  bool operator==(const SceneSpec& o) const;
};

nlohmann::ordered_json scene_to_json(const SceneSpec& s);
SceneSpec scene_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Prompt grammar: canonical strings with an exact constraint list.
// ---------------------------------------------------------------------------

enum class Category : int {
  single = 0,
  two_object,
  counting,
  colors,
  position,
  color_attribution,
  text,
};

const char* category_name(Category c);
Category category_from_name(const std::string& name);
constexpr int kNumCategories = 7;

enum class Relation : int { left_of = 0, right_of, above, below };

struct CountConstraint {
  std::optional<Color> color;  // empty = any color
  Shape shape;
  int count = 1;  // exact-match semantics
};

struct RelationConstraint {
  Color c1;
  Shape s1;
  Relation rel;
  Color c2;
  Shape s2;
};

struct TextConstraint {
  std::string text;
};

struct Constraint {
  enum class Kind { count, relation, text } kind;
  CountConstraint count;
  RelationConstraint relation;
  TextConstraint text;
};

struct PromptSpec {
  Category category = Category::single;
  std::string text;  // canonical form
  std::vector<Constraint> constraints;
};

// parses a canonical prompt; throws with a diagnostic listing accepted
// productions when the string is outside the grammar
PromptSpec parse_prompt(const std::string& text);

// regenerates the canonical prompt string from a constraint list; the grammar
// round-trips: canonical_text(parse_prompt(t)) == t on canonical forms
std::string canonical_text(const PromptSpec& p);

// word inventory of the grammar (the AR text vocabulary)
const std::vector<std::string>& grammar_words();

// tokenize a canonical prompt into grammar words; throws on unknown words
std::vector<std::string> tokenize_prompt(const std::string& text);

inline const char* kReconstructionPrompt = "Keep the image unchanged.";

// ---------------------------------------------------------------------------
// Rendering and exact parsing
// ---------------------------------------------------------------------------

// 8x8 boolean stamp for a shape and 3x5 bitmap for a letter
const std::array<uint8_t, kCell * kCell>& shape_template(Shape s);
const std::array<uint8_t, 15>& letter_bitmap(char letter);

Image render(const SceneSpec& scene);
SceneSpec parse(const Image& img);

// rewards in [0,1]
double score_composition(const PromptSpec& prompt, const Image& img);
double score_glyphs(const PromptSpec& prompt, const Image& img);

// constraint evaluation against an already-parsed scene
bool constraint_satisfied(const Constraint& c, const SceneSpec& parsed);

// ---------------------------------------------------------------------------
// Scene sampling
// ---------------------------------------------------------------------------

std::pair<SceneSpec, PromptSpec> sample_scene(uint64_t seed, Category category);

// ---------------------------------------------------------------------------
// Editing
// ---------------------------------------------------------------------------

enum class EditKind : int { add = 0, remove = 1, recolor = 2, move = 3 };

const char* edit_kind_name(EditKind k);

struct EditOp {
  EditKind kind;
  Color color;      // descriptor color (add: color of the new object)
  Shape shape;      // descriptor shape
  int row = -1;     // destination cell (add, move)
  int col = -1;
  Color new_color = Color::red;  // recolor only
};

struct EditResult {
  SceneSpec scene;
  std::string instruction;
};

// applies op; throws naming the conflict when the op is inapplicable
EditResult apply_edit(const SceneSpec& scene, const EditOp& op);

// cells touched by the op: source (and destination for move/add)
std::vector<std::pair<int, int>> edited_cells(const SceneSpec& before, const EditOp& op);

// deterministically samples an edit op applicable to the scene
EditOp sample_edit(const SceneSpec& scene, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct DatasetConfig {
  int t2i = 0;
  int recon = 0;
  int edit = 0;
  uint64_t seed = 0;
  // category weights for t2i sampling, indexed by Category
  std::array<double, kNumCategories> category_mix = {1, 1, 1, 1, 1, 1, 1};
};

struct DatasetRecord {
  std::string task;  // "t2i" | "recon" | "edit"
  std::string prompt;
  SceneSpec scene;          // the target scene
  std::string image;        // relative path of the target image
  std::string ref_image;    // relative path of the reference image (recon/edit)
  Category category = Category::single;  // t2i records only
};

// writes images/ and data.jsonl under out_dir; returns the records
std::vector<DatasetRecord> make_dataset(const DatasetConfig& cfg,
                                        const std::string& out_dir);

// reads data.jsonl back (paths stay relative to out_dir)
std::vector<DatasetRecord> load_dataset(const std::string& out_dir);

}  // namespace flowgen::world
