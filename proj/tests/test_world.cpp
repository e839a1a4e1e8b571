#include "flowgen/world.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"

using namespace flowgen;
using namespace flowgen::world;

namespace {

// ---------------------------------------------------------------------------
// Reference rasterizer: an independent per-pixel implementation with its own
// frozen copies of the stamps. render() is checked against this oracle.
// ---------------------------------------------------------------------------

const char* kRefCircle[8] = {"........", "..XXXX..", ".XXXXXX.", ".XXXXXX.",
                             ".XXXXXX.", ".XXXXXX.", "..XXXX..", "........"};
const char* kRefSquare[8] = {"........", ".XXXXXX.", ".XXXXXX.", ".XXXXXX.",
                             ".XXXXXX.", ".XXXXXX.", ".XXXXXX.", "........"};
const char* kRefTriangle[8] = {"........", "...XX...", "...XX...", "..XXXX..",
                               "..XXXX..", ".XXXXXX.", ".XXXXXX.", "........"};

const char* kRefFont[26][5] = {
    {"010", "101", "111", "101", "101"}, {"110", "101", "110", "101", "110"},
    {"011", "100", "100", "100", "010"}, {"110", "101", "101", "001", "110"},
    {"111", "110", "110", "100", "111"}, {"111", "100", "110", "100", "100"},
    {"011", "100", "101", "101", "011"}, {"101", "101", "111", "101", "101"},
    {"111", "010", "011", "010", "111"}, {"001", "001", "001", "101", "010"},
    {"101", "110", "100", "110", "101"}, {"100", "100", "100", "100", "111"},
    {"101", "111", "111", "100", "001"}, {"101", "110", "111", "111", "101"},
    {"010", "101", "101", "101", "010"}, {"110", "101", "010", "100", "100"},
    {"010", "101", "101", "110", "011"}, {"110", "101", "110", "110", "101"},
    {"011", "100", "010", "001", "110"}, {"111", "010", "010", "010", "010"},
    {"001", "101", "101", "101", "111"}, {"101", "101", "101", "010", "010"},
    {"101", "101", "111", "111", "110"}, {"101", "010", "010", "010", "101"},
    {"101", "101", "010", "010", "010"}, {"111", "001", "010", "100", "111"},
};

float ref_color(Color c, int ch) {
  static const float rgb[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                  {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};
  return rgb[static_cast<int>(c)][ch];
}

Image reference_render(const SceneSpec& scene) {
  Image img;
  const float bg = 51.0f / 255.0f;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg;
  for (const auto& o : scene.objects) {
    const char** stamp = o.shape == Shape::circle   ? kRefCircle
                         : o.shape == Shape::square ? kRefSquare
                                                    : kRefTriangle;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (stamp[y][x] == 'X')
          for (int c = 0; c < 3; ++c)
            img.at(o.row * 8 + y, o.col * 8 + x, c) = ref_color(o.color, c);
  }
  if (scene.glyphs) {
    for (size_t i = 0; i < scene.glyphs->text.size(); ++i) {
      int l = scene.glyphs->text[i] - 'A';
      Color ink = static_cast<Color>(l % 6);  // frozen ink rule
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 3; ++x)
          if (kRefFont[l][y][x] == '1')
            for (int c = 0; c < 3; ++c)
              img.at(scene.glyphs->row * 8 + 1 + y,
                     (scene.glyphs->col + static_cast<int>(i)) * 8 + 2 + x, c) =
                  ref_color(ink, c);
    }
  }
  return img;
}

SceneSpec random_scene(uint64_t seed) {
  Category cat = static_cast<Category>(seed % kNumCategories);
  return sample_scene(seed, cat).first;
}

}  // namespace

TEST_SUITE_BEGIN("world");

TEST_CASE("render matches the reference rasterizer") {
  // the spec'd example: one red square at (0,0)
  SceneSpec s;
  s.objects.push_back({Shape::square, Color::red, 0, 0});
  CHECK(render(s) == reference_render(s));
  // and random scenes from every category
  for (uint64_t seed = 0; seed < 200; ++seed) {
    SceneSpec sc = random_scene(seed);
    CHECK(render(sc) == reference_render(sc));
  }
}

TEST_CASE("red square at (0,0) sets exactly the template pixels") {
  SceneSpec s;
  s.objects.push_back({Shape::square, Color::red, 0, 0});
  Image img = render(s);
  int red_pixels = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      bool is_red = img.at(y, x, 0) == 1.0f && img.at(y, x, 1) == 0.0f &&
                    img.at(y, x, 2) == 0.0f;
      bool in_template = y >= 1 && y <= 6 && x >= 1 && x <= 6;
      CHECK(is_red == in_template);
      red_pixels += is_red;
    }
  CHECK(red_pixels == 36);
}

TEST_CASE("parse of render is the identity on 1000 random scenes") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    SceneSpec s = random_scene(seed);
    CHECK(parse(render(s)) == s);
  }
}

TEST_CASE("all-background image parses to the empty scene") {
  SceneSpec empty;
  Image img = render(empty);
  SceneSpec parsed = parse(img);
  CHECK(parsed.objects.empty());
  CHECK(!parsed.glyphs.has_value());
}

TEST_CASE("template margins: pairwise Hamming distance > 2") {
  // cell-level templates: empty, 18 shape-color stamps, 26 letters
  std::vector<std::vector<float>> cells;
  {
    SceneSpec s;
    cells.push_back(render(s).px);  // background-only, cell (0,0)
  }
  for (int sh = 0; sh < kShapes; ++sh)
    for (int c = 0; c < kColors; ++c) {
      SceneSpec s;
      s.objects.push_back({static_cast<Shape>(sh), static_cast<Color>(c), 0, 0});
      cells.push_back(render(s).px);
    }
  for (char l = 'A'; l <= 'Z'; ++l) {
    SceneSpec s;
    s.glyphs = GlyphSpec{std::string(1, l), 0, 0};
    cells.push_back(render(s).px);
  }
  // restrict to the top-left cell and count differing pixels
  auto cell_pixels = [](const std::vector<float>& px) {
    std::vector<std::array<float, 3>> out;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        out.push_back({px[(y * 32 + x) * 3], px[(y * 32 + x) * 3 + 1],
                       px[(y * 32 + x) * 3 + 2]});
    return out;
  };
  int min_hamming = 1 << 20;
  for (size_t i = 0; i < cells.size(); ++i)
    for (size_t j = i + 1; j < cells.size(); ++j) {
      auto a = cell_pixels(cells[i]), b = cell_pixels(cells[j]);
      int ham = 0;
      for (size_t p = 0; p < a.size(); ++p)
        if (a[p] != b[p]) ++ham;
      min_hamming = std::min(min_hamming, ham);
    }
  CHECK(min_hamming > 2);
}

TEST_CASE("font bitmaps keep pairwise Hamming distance >= 3") {
  for (char a = 'A'; a <= 'Z'; ++a)
    for (char b = static_cast<char>(a + 1); b <= 'Z'; ++b) {
      const auto& ba = letter_bitmap(a);
      const auto& bb = letter_bitmap(b);
      int d = 0;
      for (int i = 0; i < 15; ++i) d += ba[i] != bb[i];
      CHECK(d >= 3);
    }
}

TEST_CASE("parse is robust to one flipped pixel") {
  Rng rng(1234);
  for (uint64_t seed = 0; seed < 100; ++seed) {
    SceneSpec s = random_scene(seed);
    Image img = render(s);
    int y = static_cast<int>(rng.uniform_index(32));
    int x = static_cast<int>(rng.uniform_index(32));
    // worst-case-ish flip: an arbitrary value in [0,1]^3
    for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(rng.uniform());
    CHECK(parse(img) == s);
  }
  // adversarial flip: push one template pixel toward an imposter color
  SceneSpec s;
  s.objects.push_back({Shape::circle, Color::red, 1, 2});
  Image img = render(s);
  img.at(1 * 8 + 1, 2 * 8 + 1, 0) = 1.0f;  // a corner the square fills
  img.at(1 * 8 + 1, 2 * 8 + 1, 1) = 0.0f;
  img.at(1 * 8 + 1, 2 * 8 + 1, 2) = 0.0f;
  CHECK(parse(img) == s);
}

TEST_CASE("sample_scene is deterministic and self-consistent") {
  for (int cat = 0; cat < kNumCategories; ++cat) {
    for (uint64_t seed = 0; seed < 40; ++seed) {
      auto [s1, p1] = sample_scene(seed, static_cast<Category>(cat));
      auto [s2, p2] = sample_scene(seed, static_cast<Category>(cat));
      CHECK(s1 == s2);
      CHECK(p1.text == p2.text);
      // scene satisfies its prompt exactly
      CHECK(score_composition(p1, render(s1)) == 1.0);
      // grammar round-trip on the canonical form
      PromptSpec reparsed = parse_prompt(p1.text);
      CHECK(reparsed.category == p1.category);
      CHECK(canonical_text(reparsed) == p1.text);
    }
  }
}

TEST_CASE("single category names shape and color of one object") {
  auto [scene, prompt] = sample_scene(0, Category::single);
  CHECK(scene.objects.size() == 1);
  std::string t = prompt.text;
  CHECK(t.find(shape_name(scene.objects[0].shape)) != std::string::npos);
  CHECK(t.find(color_name(scene.objects[0].color)) != std::string::npos);
}

TEST_CASE("counting scenes satisfy their exact counts") {
  auto [scene, prompt] = sample_scene(1, Category::counting);
  const auto& c = prompt.constraints[0].count;
  int n = 0;
  for (const auto& o : scene.objects)
    if (o.shape == c.shape && o.color == *c.color) ++n;
  CHECK(n == c.count);
}

TEST_CASE("exact-match counting: missing object scores zero on that constraint") {
  PromptSpec p = parse_prompt("two red circles");
  SceneSpec s;
  s.objects.push_back({Shape::circle, Color::red, 0, 0});
  CHECK(score_composition(p, render(s)) == 0.0);
}

TEST_CASE("half-satisfied attribution prompt scores 0.5") {
  PromptSpec p = parse_prompt("a red circle and a blue square");
  SceneSpec s;
  s.objects.push_back({Shape::circle, Color::red, 0, 0});
  s.objects.push_back({Shape::square, Color::green, 2, 2});
  CHECK(score_composition(p, render(s)) == 0.5);
}

TEST_CASE("glyph scoring") {
  PromptSpec p = parse_prompt("the text 'HI'");
  SceneSpec good;
  good.glyphs = GlyphSpec{"HI", 1, 1};
  CHECK(score_glyphs(p, render(good)) == 1.0);
  SceneSpec off;
  off.glyphs = GlyphSpec{"HX", 1, 1};
  CHECK(score_glyphs(p, render(off)) == 0.5);
  SceneSpec empty;
  PromptSpec pa = parse_prompt("the text 'A'");
  CHECK(score_glyphs(pa, render(empty)) == 0.0);
}

TEST_CASE("rewards are pure functions") {
  auto [scene, prompt] = sample_scene(5, Category::position);
  Image img = render(scene);
  double a = score_composition(prompt, img);
  double b = score_composition(prompt, img);
  CHECK(a == b);
}

TEST_CASE("recolor edit shows up in the parse, same cell") {
  SceneSpec s;
  s.objects.push_back({Shape::circle, Color::red, 2, 3});
  EditOp op;
  op.kind = EditKind::recolor;
  op.color = Color::red;
  op.shape = Shape::circle;
  op.new_color = Color::blue;
  auto res = apply_edit(s, op);
  CHECK(res.instruction == "recolor the red circle to blue");
  SceneSpec parsed = parse(render(res.scene));
  REQUIRE(parsed.objects.size() == 1);
  CHECK(parsed.objects[0].color == Color::blue);
  CHECK(parsed.objects[0].shape == Shape::circle);
  CHECK(parsed.objects[0].row == 2);
  CHECK(parsed.objects[0].col == 3);
}

TEST_CASE("remove then add restores the original scene") {
  SceneSpec s;
  s.objects.push_back({Shape::triangle, Color::cyan, 1, 1});
  s.objects.push_back({Shape::square, Color::yellow, 3, 0});
  EditOp rm;
  rm.kind = EditKind::remove;
  rm.color = Color::cyan;
  rm.shape = Shape::triangle;
  auto removed = apply_edit(s, rm);
  CHECK(removed.scene.objects.size() == 1);
  EditOp add;
  add.kind = EditKind::add;
  add.color = Color::cyan;
  add.shape = Shape::triangle;
  add.row = 1;
  add.col = 1;
  auto restored = apply_edit(removed.scene, add);
  CHECK(restored.scene == s);
}

TEST_CASE("move to an occupied cell fails naming the conflict") {
  SceneSpec s;
  s.objects.push_back({Shape::circle, Color::red, 0, 0});
  s.objects.push_back({Shape::square, Color::blue, 1, 1});
  EditOp mv;
  mv.kind = EditKind::move;
  mv.color = Color::red;
  mv.shape = Shape::circle;
  mv.row = 1;
  mv.col = 1;
  try {
    apply_edit(s, mv);
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("occupied") != std::string::npos);
  }
}

TEST_CASE("edit locality: pixels outside the edited cells are bit-identical") {
  Rng rng(777);
  for (int trial = 0; trial < 50; ++trial) {
    SceneSpec before = random_scene(3000 + trial);
    if (before.glyphs) continue;  // edits target object scenes
    if (before.objects.empty()) continue;
    EditOp op;
    try {
      op = sample_edit(before, rng);
    } catch (const std::exception&) {
      continue;
    }
    auto cells = edited_cells(before, op);
    auto after = apply_edit(before, op);
    Image a = render(before), b = render(after.scene);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        bool in_edit = false;
        for (auto [r, c] : cells)
          if (y / 8 == r && x / 8 == c) in_edit = true;
        if (in_edit) continue;
        for (int ch = 0; ch < 3; ++ch) CHECK(a.at(y, x, ch) == b.at(y, x, ch));
      }
  }
}

TEST_CASE("make_dataset is deterministic and structurally sound") {
  namespace fs = std::filesystem;
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  fs::path dir1 = fs::temp_directory_path() / "fg_world_ds1";
  fs::path dir2 = fs::temp_directory_path() / "fg_world_ds2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  DatasetConfig cfg;
  cfg.t2i = 10;
  cfg.recon = 4;
  cfg.edit = 6;
  cfg.seed = 7;
  make_dataset(cfg, dir1.string());
  make_dataset(cfg, dir2.string());
  CHECK(slurp(dir1 / "data.jsonl") == slurp(dir2 / "data.jsonl"));

  auto records = load_dataset(dir1.string());
  REQUIRE(records.size() == 20);
  for (const auto& r : records) {
    Image target = read_ppm((dir1 / r.image).string());
    CHECK(target == render(r.scene));  // target image renders the stored scene
    if (r.task == "recon") {
      CHECK(r.ref_image == r.image);
      CHECK(r.prompt == std::string(kReconstructionPrompt));
    }
    if (r.task == "edit") {
      CHECK(!r.ref_image.empty());
      Image ref = read_ppm((dir1 / r.ref_image).string());
      // the instruction replayed against the parsed reference gives the target
      SceneSpec ref_scene = parse(ref);
      CHECK(parse(target) == r.scene);
      CHECK(ref_scene.valid());
    }
  }
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("ppm roundtrip preserves rendered scenes") {
  namespace fs = std::filesystem;
  SceneSpec s = random_scene(42);
  Image img = render(s);
  fs::path p = fs::temp_directory_path() / "fg_world_rt.ppm";
  write_ppm(img, p.string());
  Image back = read_ppm(p.string());
  CHECK(back == img);  // all channel values are exact multiples of 1/255
  CHECK(parse(back) == s);
  fs::remove(p);
}

TEST_CASE("out-of-grammar prompt diagnostics list productions") {
  try {
    parse_prompt("a purple blob");
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("accepted productions") != std::string::npos);
  }
}

TEST_CASE("reconstruction prompt tokenizes inside the grammar") {
  auto toks = tokenize_prompt(kReconstructionPrompt);
  std::vector<std::string> want = {"keep", "the", "image", "unchanged", "."};
  CHECK(toks == want);
}

TEST_CASE("grammar word inventory fits the text vocab region") {
  CHECK(grammar_words().size() <= 64);
  // no duplicates
  std::set<std::string> uniq(grammar_words().begin(), grammar_words().end());
  CHECK(uniq.size() == grammar_words().size());
}

TEST_SUITE_END();
