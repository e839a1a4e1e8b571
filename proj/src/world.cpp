#include "flowgen/world.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace flowgen::world {

// ---------------------------------------------------------------------------
// Names and colors
// ---------------------------------------------------------------------------

static const char* kShapeNames[kShapes] = {"circle", "square", "triangle"};
static const char* kShapePlural[kShapes] = {"circles", "squares", "triangles"};
static const char* kColorNames[kColors] = {"red",    "green",   "blue",
                                           "yellow", "magenta", "cyan"};
static const char* kNumberWords[4] = {"one", "two", "three", "four"};

const char* shape_name(Shape s) { return kShapeNames[static_cast<int>(s)]; }
const char* color_name(Color c) { return kColorNames[static_cast<int>(c)]; }

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.f, 0.f, 0.f};
    case Color::green: return {0.f, 1.f, 0.f};
    case Color::blue: return {0.f, 0.f, 1.f};
    case Color::yellow: return {1.f, 1.f, 0.f};
    case Color::magenta: return {1.f, 0.f, 1.f};
    case Color::cyan: return {0.f, 1.f, 1.f};
  }
  fail("color_rgb: bad color");
}

// glyph ink color is a fixed function of the letter, which keeps the patch
// vocabulary of rendered text diverse
static Color letter_ink(char letter) {
  return static_cast<Color>((letter - 'A') % kColors);
}

static const char* kCategoryNames[kNumCategories] = {
    "single", "two-object", "counting", "colors",
    "position", "color-attribution", "text"};

const char* category_name(Category c) { return kCategoryNames[static_cast<int>(c)]; }

Category category_from_name(const std::string& name) {
  for (int i = 0; i < kNumCategories; ++i)
    if (name == kCategoryNames[i]) return static_cast<Category>(i);
  fail("unknown category '" + name + "'");
}

const char* edit_kind_name(EditKind k) {
  switch (k) {
    case EditKind::add: return "add";
    case EditKind::remove: return "remove";
    case EditKind::recolor: return "recolor";
    case EditKind::move: return "move";
  }
  fail("edit_kind_name: bad kind");
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

static std::array<uint8_t, 64> make_shape(const char* rows[8]) {
  std::array<uint8_t, 64> t{};
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) t[y * 8 + x] = rows[y][x] == 'X';
  return t;
}

const std::array<uint8_t, 64>& shape_template(Shape s) {
  static const char* circle[8] = {"........", "..XXXX..", ".XXXXXX.",
                                  ".XXXXXX.", ".XXXXXX.", ".XXXXXX.",
                                  "..XXXX..", "........"};
  static const char* square[8] = {"........", ".XXXXXX.", ".XXXXXX.",
                                  ".XXXXXX.", ".XXXXXX.", ".XXXXXX.",
                                  ".XXXXXX.", "........"};
  static const char* triangle[8] = {"........", "...XX...", "...XX...",
                                    "..XXXX..", "..XXXX..", ".XXXXXX.",
                                    ".XXXXXX.", "........"};
  static const std::array<std::array<uint8_t, 64>, 3> all = {
      make_shape(circle), make_shape(square), make_shape(triangle)};
  return all[static_cast<int>(s)];
}

// 3x5 font, min pairwise Hamming distance 3 (verified by test); a few pixels
// deviate from the usual forms to keep that margin
static const char* kFont[26][5] = {
    /*A*/ {"010", "101", "111", "101", "101"},
    /*B*/ {"110", "101", "110", "101", "110"},
    /*C*/ {"011", "100", "100", "100", "010"},
    /*D*/ {"110", "101", "101", "001", "110"},
    /*E*/ {"111", "110", "110", "100", "111"},
    /*F*/ {"111", "100", "110", "100", "100"},
    /*G*/ {"011", "100", "101", "101", "011"},
    /*H*/ {"101", "101", "111", "101", "101"},
    /*I*/ {"111", "010", "011", "010", "111"},
    /*J*/ {"001", "001", "001", "101", "010"},
    /*K*/ {"101", "110", "100", "110", "101"},
    /*L*/ {"100", "100", "100", "100", "111"},
    /*M*/ {"101", "111", "111", "100", "001"},
    /*N*/ {"101", "110", "111", "111", "101"},
    /*O*/ {"010", "101", "101", "101", "010"},
    /*P*/ {"110", "101", "010", "100", "100"},
    /*Q*/ {"010", "101", "101", "110", "011"},
    /*R*/ {"110", "101", "110", "110", "101"},
    /*S*/ {"011", "100", "010", "001", "110"},
    /*T*/ {"111", "010", "010", "010", "010"},
    /*U*/ {"001", "101", "101", "101", "111"},
    /*V*/ {"101", "101", "101", "010", "010"},
    /*W*/ {"101", "101", "111", "111", "110"},
    /*X*/ {"101", "010", "010", "010", "101"},
    /*Y*/ {"101", "101", "010", "010", "010"},
    /*Z*/ {"111", "001", "010", "100", "111"},
};

const std::array<uint8_t, 15>& letter_bitmap(char letter) {
  check(letter >= 'A' && letter <= 'Z',
        "letter_bitmap: '" + std::string(1, letter) + "' is not in A-Z");
  static const std::array<std::array<uint8_t, 15>, 26> cache = [] {
    std::array<std::array<uint8_t, 15>, 26> all{};
    for (int l = 0; l < 26; ++l)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 3; ++x) all[l][y * 3 + x] = kFont[l][y][x] == '1';
    return all;
  }();
  return cache[letter - 'A'];
}

// glyph placement inside its cell: rows 1..5, cols 2..4 (straddles the 4x4
// patch grid both ways, which keeps the token vocabulary diverse)
static constexpr int kGlyphRowOff = 1;
static constexpr int kGlyphColOff = 2;

// ---------------------------------------------------------------------------
// SceneSpec
// ---------------------------------------------------------------------------

static bool glyph_reserves(const GlyphSpec& g, int row, int col) {
  return row == g.row && col >= g.col &&
         col < g.col + static_cast<int>(g.text.size());
}

bool SceneSpec::valid(std::string* why) const {
  auto bad = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  if (objects.size() > 6) return bad("more than 6 objects");
  std::array<bool, kGrid * kGrid> used{};
  if (glyphs) {
    const auto& g = *glyphs;
    if (g.text.empty() || g.text.size() > 3) return bad("glyph text length must be 1..3");
    for (char ch : g.text)
      if (ch < 'A' || ch > 'Z') return bad("glyph text must be uppercase A-Z");
    if (g.row < 0 || g.row >= kGrid || g.col < 0 ||
        g.col + static_cast<int>(g.text.size()) > kGrid)
      return bad("glyph text does not fit on the grid");
    for (int i = 0; i < static_cast<int>(g.text.size()); ++i)
      used[g.row * kGrid + g.col + i] = true;
  }
  for (const auto& o : objects) {
    if (o.row < 0 || o.row >= kGrid || o.col < 0 || o.col >= kGrid)
      return bad("object cell out of range");
    if (used[o.row * kGrid + o.col]) return bad("two entities share a cell");
    used[o.row * kGrid + o.col] = true;
  }
  return true;
}

void SceneSpec::normalize() {
  std::sort(objects.begin(), objects.end(), [](const ObjectSpec& a, const ObjectSpec& b) {
    if (a.row != b.row) return a.row < b.row;
    return a.col < b.col;
  });
}

bool SceneSpec::operator==(const SceneSpec& o) const {
  SceneSpec a = *this, b = o;
  a.normalize();
  b.normalize();
  return a.objects == b.objects && a.glyphs == b.glyphs;
}

nlohmann::ordered_json scene_to_json(const SceneSpec& s) {
  SceneSpec c = s;
  c.normalize();
  nlohmann::ordered_json j;
  j["objects"] = nlohmann::ordered_json::array();
  for (const auto& o : c.objects)
    j["objects"].push_back({{"shape", shape_name(o.shape)},
                            {"color", color_name(o.color)},
                            {"cell", {o.row, o.col}}});
  if (c.glyphs)
    j["glyphs"] = {{"text", c.glyphs->text}, {"cell", {c.glyphs->row, c.glyphs->col}}};
  return j;
}

static Shape shape_from_name(const std::string& n) {
  for (int i = 0; i < kShapes; ++i)
    if (n == kShapeNames[i]) return static_cast<Shape>(i);
  fail("unknown shape '" + n + "'");
}

static Color color_from_name(const std::string& n) {
  for (int i = 0; i < kColors; ++i)
    if (n == kColorNames[i]) return static_cast<Color>(i);
  fail("unknown color '" + n + "'");
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& o : j.at("objects")) {
    ObjectSpec obj;
    obj.shape = shape_from_name(o.at("shape").get<std::string>());
    obj.color = color_from_name(o.at("color").get<std::string>());
    obj.row = o.at("cell")[0].get<int>();
    obj.col = o.at("cell")[1].get<int>();
    s.objects.push_back(obj);
  }
  if (j.contains("glyphs")) {
    GlyphSpec g;
    g.text = j["glyphs"].at("text").get<std::string>();
    g.row = j["glyphs"].at("cell")[0].get<int>();
    g.col = j["glyphs"].at("cell")[1].get<int>();
    s.glyphs = g;
  }
  std::string why;
  check(s.valid(&why), "scene_from_json: invalid scene: " + why);
  return s;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

Image render(const SceneSpec& scene) {
  std::string why;
  check(scene.valid(&why), "render: invalid scene: " + why);
  Image img;
  std::fill(img.px.begin(), img.px.end(), kBackground);
  for (const auto& o : scene.objects) {
    const auto& tmpl = shape_template(o.shape);
    auto rgb = color_rgb(o.color);
    int y0 = o.row * kCell, x0 = o.col * kCell;
    for (int y = 0; y < kCell; ++y)
      for (int x = 0; x < kCell; ++x)
        if (tmpl[y * kCell + x])
          for (int c = 0; c < 3; ++c) img.at(y0 + y, x0 + x, c) = rgb[c];
  }
  if (scene.glyphs) {
    const auto& g = *scene.glyphs;
    for (int i = 0; i < static_cast<int>(g.text.size()); ++i) {
      const auto& bm = letter_bitmap(g.text[i]);
      auto ink = color_rgb(letter_ink(g.text[i]));
      int y0 = g.row * kCell + kGlyphRowOff;
      int x0 = (g.col + i) * kCell + kGlyphColOff;
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 3; ++x)
          if (bm[y * 3 + x])
            for (int c = 0; c < 3; ++c) img.at(y0 + y, x0 + x, c) = ink[c];
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Parsing: per-cell nearest template over {empty, shape x color, letter}
// ---------------------------------------------------------------------------

namespace {

struct CellTemplate {
  // fixed order: 0 = empty; 1..18 = shape*6+color; 19..44 = letters A..Z
  int shape = -1, color = -1, letter = -1;
  std::array<float, kCell * kCell * 3> px{};
};

const std::vector<CellTemplate>& cell_templates() {
  static const std::vector<CellTemplate> all = [] {
    std::vector<CellTemplate> ts;
    CellTemplate empty;
    empty.px.fill(kBackground);
    ts.push_back(empty);
    for (int s = 0; s < kShapes; ++s)
      for (int c = 0; c < kColors; ++c) {
        CellTemplate t;
        t.shape = s;
        t.color = c;
        t.px.fill(kBackground);
        const auto& tmpl = shape_template(static_cast<Shape>(s));
        auto rgb = color_rgb(static_cast<Color>(c));
        for (int i = 0; i < kCell * kCell; ++i)
          if (tmpl[i])
            for (int ch = 0; ch < 3; ++ch) t.px[i * 3 + ch] = rgb[ch];
        ts.push_back(t);
      }
    for (int l = 0; l < 26; ++l) {
      CellTemplate t;
      t.letter = l;
      t.px.fill(kBackground);
      const auto& bm = letter_bitmap(static_cast<char>('A' + l));
      auto ink = color_rgb(letter_ink(static_cast<char>('A' + l)));
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 3; ++x)
          if (bm[y * 3 + x]) {
            int py = kGlyphRowOff + y, px = kGlyphColOff + x;
            for (int ch = 0; ch < 3; ++ch)
              t.px[(py * kCell + px) * 3 + ch] = ink[ch];
          }
      ts.push_back(t);
    }
    return ts;
  }();
  return all;
}

int classify_cell(const Image& img, int row, int col) {
  const auto& ts = cell_templates();
  std::array<float, kCell * kCell * 3> cell;
  int y0 = row * kCell, x0 = col * kCell;
  for (int y = 0; y < kCell; ++y)
    for (int x = 0; x < kCell; ++x)
      for (int c = 0; c < 3; ++c)
        cell[(y * kCell + x) * 3 + c] = img.at(y0 + y, x0 + x, c);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t ti = 0; ti < ts.size(); ++ti) {
    double d = 0;
    for (size_t i = 0; i < cell.size(); ++i) {
      double diff = cell[i] - ts[ti].px[i];
      d += diff * diff;
    }
    if (d < best_d) {  // strict: ties break to the lowest template index
      best_d = d;
      best = static_cast<int>(ti);
    }
  }
  return best;
}

}  // namespace

SceneSpec parse(const Image& img) {
  SceneSpec scene;
  std::array<int, kGrid * kGrid> letter_at;
  letter_at.fill(-1);
  for (int r = 0; r < kGrid; ++r)
    for (int c = 0; c < kGrid; ++c) {
      int t = classify_cell(img, r, c);
      if (t == 0) continue;
      const auto& ct = cell_templates()[t];
      if (ct.letter >= 0) {
        letter_at[r * kGrid + c] = ct.letter;
      } else {
        scene.objects.push_back({static_cast<Shape>(ct.shape),
                                 static_cast<Color>(ct.color), r, c});
      }
    }
  // glyph text: the first maximal horizontal run of letter cells, row-major
  for (int r = 0; r < kGrid && !scene.glyphs; ++r)
    for (int c = 0; c < kGrid; ++c) {
      if (letter_at[r * kGrid + c] < 0) continue;
      GlyphSpec g;
      g.row = r;
      g.col = c;
      while (c < kGrid && letter_at[r * kGrid + c] >= 0 && g.text.size() < 3) {
        g.text.push_back(static_cast<char>('A' + letter_at[r * kGrid + c]));
        ++c;
      }
      scene.glyphs = g;
      break;
    }
  scene.normalize();
  return scene;
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

const std::vector<std::string>& grammar_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w = {"a", "the", "and"};
    for (auto* c : kColorNames) w.push_back(c);
    for (auto* s : kShapeNames) w.push_back(s);
    for (auto* s : kShapePlural) w.push_back(s);
    for (auto* n : kNumberWords) w.push_back(n);
    for (auto* r : {"left", "right", "above", "below", "of"}) w.push_back(r);
    w.push_back("text");
    for (char l = 'A'; l <= 'Z'; ++l) w.push_back(std::string(1, l));
    for (auto* v : {"add", "remove", "recolor", "move", "keep"}) w.push_back(v);
    for (auto* m : {"image", "unchanged", "to", "at", "row", "column"}) w.push_back(m);
    w.push_back(".");
    return w;
  }();
  return words;
}

static std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> tokenize_prompt(const std::string& text) {
  static const auto& words = grammar_words();
  auto known = [&](const std::string& w) {
    return std::find(words.begin(), words.end(), w) != words.end();
  };
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string raw;
  while (is >> raw) {
    bool trailing_dot = false;
    if (raw.size() > 1 && raw.back() == '.') {
      trailing_dot = true;
      raw.pop_back();
    }
    if (raw.size() >= 2 && (raw.front() == '\'' || raw.front() == '"') &&
        raw.back() == raw.front()) {
      // quoted letter run: each character is a letter token
      for (size_t i = 1; i + 1 < raw.size(); ++i) {
        std::string l(1, raw[i]);
        check(raw[i] >= 'A' && raw[i] <= 'Z',
              "tokenize: '" + l + "' is not an uppercase letter");
        out.push_back(l);
      }
    } else {
      std::string w = to_lower(raw);
      check(known(w), "tokenize: word '" + raw + "' is outside the grammar");
      out.push_back(w);
    }
    if (trailing_dot) out.push_back(".");
  }
  return out;
}

namespace {

std::optional<Color> color_from_word(const std::string& w) {
  for (int i = 0; i < kColors; ++i)
    if (w == kColorNames[i]) return static_cast<Color>(i);
  return std::nullopt;
}

std::optional<Shape> shape_from_word(const std::string& w, bool* plural = nullptr) {
  for (int i = 0; i < kShapes; ++i) {
    if (w == kShapeNames[i]) {
      if (plural) *plural = false;
      return static_cast<Shape>(i);
    }
    if (w == kShapePlural[i]) {
      if (plural) *plural = true;
      return static_cast<Shape>(i);
    }
  }
  return std::nullopt;
}

std::optional<int> number_from_word(const std::string& w) {
  for (int i = 0; i < 4; ++i)
    if (w == kNumberWords[i]) return i + 1;
  return std::nullopt;
}

Constraint count_constraint(std::optional<Color> c, Shape s, int n) {
  Constraint out;
  out.kind = Constraint::Kind::count;
  out.count = {c, s, n};
  return out;
}

const char* kProductions =
    "accepted productions:\n"
    "  single:            a <color> <shape>\n"
    "  two-object:        a <shape> and a <shape>\n"
    "  counting:          <number> <color> <shape>s [and <number> <color> <shape>s]\n"
    "  colors:            a <color> <shape> and a <color> <shape>   (same shape)\n"
    "  color-attribution: a <color> <shape> and a <color> <shape>   (different shapes)\n"
    "  position:          a <color> <shape> (left of|right of|above|below) a <color> <shape>\n"
    "  text:              the text '<LETTERS>'  (1-3 uppercase letters)";

[[noreturn]] void grammar_error(const std::string& text, const std::string& why) {
  fail("prompt '" + text + "' is not in the grammar (" + why + ")\n" + kProductions);
}

}  // namespace

PromptSpec parse_prompt(const std::string& text) {
  std::vector<std::string> tok;
  try {
    tok = tokenize_prompt(text);
  } catch (const std::exception& e) {
    grammar_error(text, e.what());
  }
  if (tok.empty()) grammar_error(text, "empty prompt");

  PromptSpec p;
  p.text = text;
  size_t i = 0;
  auto eat = [&](const std::string& w) {
    if (i < tok.size() && tok[i] == w) {
      ++i;
      return true;
    }
    return false;
  };
  auto done = [&] { return i == tok.size(); };

  // text category: the text 'XYZ'
  if (tok[0] == "the") {
    if (!(eat("the") && eat("text"))) grammar_error(text, "expected `the text`");
    std::string letters;
    while (i < tok.size() && tok[i].size() == 1 && tok[i][0] >= 'A' && tok[i][0] <= 'Z')
      letters.push_back(tok[i++][0]);
    if (letters.empty() || letters.size() > 3 || !done())
      grammar_error(text, "text prompt needs 1-3 quoted uppercase letters");
    p.category = Category::text;
    Constraint c;
    c.kind = Constraint::Kind::text;
    c.text = {letters};
    p.constraints.push_back(c);
    return p;
  }

  // counting: <number> <color> <shape>s [and <number> <color> <shape>s]
  if (number_from_word(tok[0])) {
    p.category = Category::counting;
    bool first = true;
    while (!done()) {
      if (!first && !eat("and")) grammar_error(text, "expected `and` between groups");
      auto n = i < tok.size() ? number_from_word(tok[i]) : std::nullopt;
      if (!n) grammar_error(text, "expected a number word");
      ++i;
      auto col = i < tok.size() ? color_from_word(tok[i]) : std::nullopt;
      if (!col) grammar_error(text, "expected a color");
      ++i;
      bool plural = false;
      auto sh = i < tok.size() ? shape_from_word(tok[i], &plural) : std::nullopt;
      if (!sh) grammar_error(text, "expected a shape");
      if ((*n >= 2) != plural) grammar_error(text, "number/plural mismatch");
      ++i;
      p.constraints.push_back(count_constraint(col, *sh, *n));
      first = false;
      if (p.constraints.size() > 2) grammar_error(text, "at most two counting groups");
    }
    return p;
  }

  // the remaining categories start with `a`
  if (!eat("a")) grammar_error(text, "expected `a`");
  auto c1 = i < tok.size() ? color_from_word(tok[i]) : std::nullopt;
  if (c1) ++i;
  auto s1 = i < tok.size() ? shape_from_word(tok[i]) : std::nullopt;
  if (!s1) grammar_error(text, "expected a shape");
  ++i;

  if (done()) {
    if (!c1) grammar_error(text, "single-object prompts name a color");
    p.category = Category::single;
    p.constraints.push_back(count_constraint(c1, *s1, 1));
    return p;
  }

  // position: a C S <rel> a C S
  Relation rel{};
  bool is_position = false;
  if (eat("left")) {
    if (!eat("of")) grammar_error(text, "expected `left of`");
    rel = Relation::left_of;
    is_position = true;
  } else if (eat("right")) {
    if (!eat("of")) grammar_error(text, "expected `right of`");
    rel = Relation::right_of;
    is_position = true;
  } else if (eat("above")) {
    rel = Relation::above;
    is_position = true;
  } else if (eat("below")) {
    rel = Relation::below;
    is_position = true;
  }

  if (is_position) {
    if (!c1) grammar_error(text, "position prompts name both colors");
    if (!eat("a")) grammar_error(text, "expected `a`");
    auto c2 = i < tok.size() ? color_from_word(tok[i]) : std::nullopt;
    if (!c2) grammar_error(text, "expected a color");
    ++i;
    auto s2 = i < tok.size() ? shape_from_word(tok[i]) : std::nullopt;
    if (!s2) grammar_error(text, "expected a shape");
    ++i;
    if (!done()) grammar_error(text, "trailing words");
    if (*c1 == *c2 && *s1 == *s2)
      grammar_error(text, "position referents must be distinguishable");
    p.category = Category::position;
    p.constraints.push_back(count_constraint(c1, *s1, 1));
    p.constraints.push_back(count_constraint(c2, *s2, 1));
    Constraint r;
    r.kind = Constraint::Kind::relation;
    r.relation = {*c1, *s1, rel, *c2, *s2};
    p.constraints.push_back(r);
    return p;
  }

  // pair: a [C] S and a [C] S
  if (!eat("and")) grammar_error(text, "expected `and`");
  if (!eat("a")) grammar_error(text, "expected `a`");
  auto c2 = i < tok.size() ? color_from_word(tok[i]) : std::nullopt;
  if (c2) ++i;
  auto s2 = i < tok.size() ? shape_from_word(tok[i]) : std::nullopt;
  if (!s2) grammar_error(text, "expected a shape");
  ++i;
  if (!done()) grammar_error(text, "trailing words");
  if (static_cast<bool>(c1) != static_cast<bool>(c2))
    grammar_error(text, "either both or neither object names a color");
  if (!c1) {
    if (*s1 == *s2) grammar_error(text, "two-object prompts use different shapes");
    p.category = Category::two_object;
    p.constraints.push_back(count_constraint(std::nullopt, *s1, 1));
    p.constraints.push_back(count_constraint(std::nullopt, *s2, 1));
    return p;
  }
  if (*c1 == *c2 && *s1 == *s2)
    grammar_error(text, "pair referents must be distinguishable");
  p.category = (*s1 == *s2) ? Category::colors : Category::color_attribution;
  p.constraints.push_back(count_constraint(c1, *s1, 1));
  p.constraints.push_back(count_constraint(c2, *s2, 1));
  return p;
}

std::string canonical_text(const PromptSpec& p) {
  auto count_phrase = [](const CountConstraint& c) {
    std::string out;
    if (c.count == 1) {
      out = "a ";
      if (c.color) out += std::string(color_name(*c.color)) + " ";
      out += shape_name(c.shape);
    } else {
      out = std::string(kNumberWords[c.count - 1]) + " ";
      if (c.color) out += std::string(color_name(*c.color)) + " ";
      out += kShapePlural[static_cast<int>(c.shape)];
    }
    return out;
  };
  switch (p.category) {
    case Category::text:
      return "the text '" + p.constraints.at(0).text.text + "'";
    case Category::single:
      return count_phrase(p.constraints.at(0).count);
    case Category::counting: {
      // counting phrases always spell the number, including "one"
      std::string out;
      for (size_t i = 0; i < p.constraints.size(); ++i) {
        const auto& c = p.constraints[i].count;
        if (i) out += " and ";
        out += std::string(kNumberWords[c.count - 1]) + " " +
               color_name(*c.color) + " " +
               (c.count == 1 ? shape_name(c.shape)
                             : kShapePlural[static_cast<int>(c.shape)]);
      }
      return out;
    }
    case Category::two_object:
    case Category::colors:
    case Category::color_attribution:
      return count_phrase(p.constraints.at(0).count) + " and " +
             count_phrase(p.constraints.at(1).count);
    case Category::position: {
      const auto& r = p.constraints.at(2).relation;
      const char* relw = r.rel == Relation::left_of    ? "left of"
                         : r.rel == Relation::right_of ? "right of"
                         : r.rel == Relation::above    ? "above"
                                                       : "below";
      return count_phrase(p.constraints.at(0).count) + " " + relw + " " +
             count_phrase(p.constraints.at(1).count);
    }
  }
  fail("canonical_text: bad category");
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

static int count_matching(const SceneSpec& s, std::optional<Color> color, Shape shape) {
  int n = 0;
  for (const auto& o : s.objects)
    if (o.shape == shape && (!color || o.color == *color)) ++n;
  return n;
}

bool constraint_satisfied(const Constraint& c, const SceneSpec& parsed) {
  switch (c.kind) {
    case Constraint::Kind::count:
      return count_matching(parsed, c.count.color, c.count.shape) == c.count.count;
    case Constraint::Kind::relation: {
      const ObjectSpec *a = nullptr, *b = nullptr;
      int na = 0, nb = 0;
      for (const auto& o : parsed.objects) {
        if (o.shape == c.relation.s1 && o.color == c.relation.c1) {
          a = &o;
          ++na;
        }
        if (o.shape == c.relation.s2 && o.color == c.relation.c2) {
          b = &o;
          ++nb;
        }
      }
      if (na != 1 || nb != 1) return false;  // relation needs unique referents
      switch (c.relation.rel) {
        case Relation::left_of: return a->col < b->col;
        case Relation::right_of: return a->col > b->col;
        case Relation::above: return a->row < b->row;
        case Relation::below: return a->row > b->row;
      }
      return false;
    }
    case Constraint::Kind::text:
      return parsed.glyphs && parsed.glyphs->text == c.text.text;
  }
  return false;
}

double score_composition(const PromptSpec& prompt, const Image& img) {
  check(!prompt.constraints.empty(), "score_composition: prompt has no constraints");
  SceneSpec parsed = parse(img);
  int ok = 0;
  for (const auto& c : prompt.constraints)
    if (constraint_satisfied(c, parsed)) ++ok;
  return static_cast<double>(ok) / static_cast<double>(prompt.constraints.size());
}

double score_glyphs(const PromptSpec& prompt, const Image& img) {
  const TextConstraint* tc = nullptr;
  for (const auto& c : prompt.constraints)
    if (c.kind == Constraint::Kind::text) tc = &c.text;
  check(tc != nullptr, "score_glyphs: prompt has no text constraint");
  SceneSpec parsed = parse(img);
  const std::string& want = tc->text;
  std::string got = parsed.glyphs ? parsed.glyphs->text : "";
  int ok = 0;
  for (size_t i = 0; i < want.size(); ++i)
    if (i < got.size() && got[i] == want[i]) ++ok;
  return static_cast<double>(ok) / static_cast<double>(want.size());
}

// ---------------------------------------------------------------------------
// Prompt/scene sampling
// ---------------------------------------------------------------------------

namespace {

std::string article_phrase(std::optional<Color> c, Shape s, int count) {
  std::string out;
  if (count == 1) {
    out = "a ";
    if (c) out += std::string(color_name(*c)) + " ";
    out += shape_name(s);
  } else {
    out = std::string(kNumberWords[count - 1]) + " ";
    if (c) out += std::string(color_name(*c)) + " ";
    out += kShapePlural[static_cast<int>(s)];
  }
  return out;
}

std::string counting_phrase(Color c, Shape s, int count) {
  std::string out = std::string(kNumberWords[count - 1]) + " " + color_name(c) + " ";
  out += (count == 1) ? shape_name(s) : kShapePlural[static_cast<int>(s)];
  return out;
}

std::vector<int> pick_cells(Rng& rng, int n) {
  std::vector<int> cells;
  for (int i = 0; i < kGrid * kGrid; ++i) cells.push_back(i);
  rng.shuffle(cells);
  cells.resize(n);
  return cells;
}

}  // namespace

std::pair<SceneSpec, PromptSpec> sample_scene(uint64_t seed, Category category) {
  Rng rng(Rng::mix(seed, 0x5ce7e + static_cast<uint64_t>(category)));
  SceneSpec scene;
  PromptSpec prompt;
  prompt.category = category;

  auto rand_color = [&] { return static_cast<Color>(rng.uniform_index(kColors)); };
  auto rand_shape = [&] { return static_cast<Shape>(rng.uniform_index(kShapes)); };

  switch (category) {
    case Category::single: {
      Color c = rand_color();
      Shape s = rand_shape();
      auto cells = pick_cells(rng, 1);
      scene.objects.push_back({s, c, cells[0] / kGrid, cells[0] % kGrid});
      prompt.text = article_phrase(c, s, 1);
      prompt.constraints.push_back(count_constraint(c, s, 1));
      break;
    }
    case Category::two_object: {
      Shape s1 = rand_shape();
      Shape s2 = s1;
      while (s2 == s1) s2 = rand_shape();
      auto cells = pick_cells(rng, 2);
      scene.objects.push_back({s1, rand_color(), cells[0] / kGrid, cells[0] % kGrid});
      scene.objects.push_back({s2, rand_color(), cells[1] / kGrid, cells[1] % kGrid});
      prompt.text = article_phrase(std::nullopt, s1, 1) + " and " +
                    article_phrase(std::nullopt, s2, 1);
      prompt.constraints.push_back(count_constraint(std::nullopt, s1, 1));
      prompt.constraints.push_back(count_constraint(std::nullopt, s2, 1));
      break;
    }
    case Category::counting: {
      int n1 = 2 + static_cast<int>(rng.uniform_index(3));  // 2..4
      Color c1 = rand_color();
      Shape s1 = rand_shape();
      bool two_groups = rng.uniform() < 0.5;
      int n2 = 0;
      Color c2 = c1;
      Shape s2 = s1;
      if (two_groups) {
        n2 = 1 + static_cast<int>(rng.uniform_index(std::min(2, 6 - n1)));
        while (c2 == c1 && s2 == s1) {
          c2 = rand_color();
          s2 = rand_shape();
        }
      }
      auto cells = pick_cells(rng, n1 + n2);
      for (int i = 0; i < n1; ++i)
        scene.objects.push_back({s1, c1, cells[i] / kGrid, cells[i] % kGrid});
      for (int i = 0; i < n2; ++i)
        scene.objects.push_back({s2, c2, cells[n1 + i] / kGrid, cells[n1 + i] % kGrid});
      prompt.text = counting_phrase(c1, s1, n1);
      prompt.constraints.push_back(count_constraint(c1, s1, n1));
      if (two_groups) {
        prompt.text += " and " + counting_phrase(c2, s2, n2);
        prompt.constraints.push_back(count_constraint(c2, s2, n2));
      }
      break;
    }
    case Category::colors: {
      Shape s = rand_shape();
      Color c1 = rand_color();
      Color c2 = c1;
      while (c2 == c1) c2 = rand_color();
      auto cells = pick_cells(rng, 2);
      scene.objects.push_back({s, c1, cells[0] / kGrid, cells[0] % kGrid});
      scene.objects.push_back({s, c2, cells[1] / kGrid, cells[1] % kGrid});
      prompt.text = article_phrase(c1, s, 1) + " and " + article_phrase(c2, s, 1);
      prompt.constraints.push_back(count_constraint(c1, s, 1));
      prompt.constraints.push_back(count_constraint(c2, s, 1));
      break;
    }
    case Category::position: {
      Color c1 = rand_color(), c2 = rand_color();
      Shape s1 = rand_shape(), s2 = rand_shape();
      while (c1 == c2 && s1 == s2) {
        c2 = rand_color();
        s2 = rand_shape();
      }
      Relation rel = static_cast<Relation>(rng.uniform_index(4));
      int a_row, a_col, b_row, b_col;
      if (rel == Relation::left_of || rel == Relation::right_of) {
        int lo = static_cast<int>(rng.uniform_index(kGrid - 1));
        int hi = lo + 1 + static_cast<int>(rng.uniform_index(kGrid - 1 - lo));
        a_col = (rel == Relation::left_of) ? lo : hi;
        b_col = (rel == Relation::left_of) ? hi : lo;
        a_row = static_cast<int>(rng.uniform_index(kGrid));
        b_row = static_cast<int>(rng.uniform_index(kGrid));
      } else {
        int lo = static_cast<int>(rng.uniform_index(kGrid - 1));
        int hi = lo + 1 + static_cast<int>(rng.uniform_index(kGrid - 1 - lo));
        a_row = (rel == Relation::above) ? lo : hi;
        b_row = (rel == Relation::above) ? hi : lo;
        a_col = static_cast<int>(rng.uniform_index(kGrid));
        b_col = static_cast<int>(rng.uniform_index(kGrid));
      }
      scene.objects.push_back({s1, c1, a_row, a_col});
      scene.objects.push_back({s2, c2, b_row, b_col});
      const char* relw = rel == Relation::left_of    ? "left of"
                         : rel == Relation::right_of ? "right of"
                         : rel == Relation::above    ? "above"
                                                     : "below";
      prompt.text = article_phrase(c1, s1, 1) + " " + relw + " " +
                    article_phrase(c2, s2, 1);
      prompt.constraints.push_back(count_constraint(c1, s1, 1));
      prompt.constraints.push_back(count_constraint(c2, s2, 1));
      Constraint r;
      r.kind = Constraint::Kind::relation;
      r.relation = {c1, s1, rel, c2, s2};
      prompt.constraints.push_back(r);
      break;
    }
    case Category::color_attribution: {
      Shape s1 = rand_shape();
      Shape s2 = s1;
      while (s2 == s1) s2 = rand_shape();
      Color c1 = rand_color();
      Color c2 = c1;
      while (c2 == c1) c2 = rand_color();
      auto cells = pick_cells(rng, 2);
      scene.objects.push_back({s1, c1, cells[0] / kGrid, cells[0] % kGrid});
      scene.objects.push_back({s2, c2, cells[1] / kGrid, cells[1] % kGrid});
      prompt.text = article_phrase(c1, s1, 1) + " and " + article_phrase(c2, s2, 1);
      prompt.constraints.push_back(count_constraint(c1, s1, 1));
      prompt.constraints.push_back(count_constraint(c2, s2, 1));
      break;
    }
    case Category::text: {
      int len = 1 + static_cast<int>(rng.uniform_index(3));
      std::string letters;
      for (int i = 0; i < len; ++i)
        letters.push_back(static_cast<char>('A' + rng.uniform_index(26)));
      GlyphSpec g;
      g.text = letters;
      g.row = static_cast<int>(rng.uniform_index(kGrid));
      g.col = static_cast<int>(rng.uniform_index(kGrid - len + 1));
      scene.glyphs = g;
      prompt.text = "the text '" + letters + "'";
      Constraint c;
      c.kind = Constraint::Kind::text;
      c.text = {letters};
      prompt.constraints.push_back(c);
      break;
    }
  }
  std::string why;
  check(scene.valid(&why), "sample_scene: generated invalid scene: " + why);
  return {scene, prompt};
}

// ---------------------------------------------------------------------------
// Editing
// ---------------------------------------------------------------------------

namespace {

std::string cell_phrase(int row, int col) {
  // 1-indexed coordinates in words
  return std::string("row ") + kNumberWords[row] + " column " + kNumberWords[col];
}

bool cell_free(const SceneSpec& s, int row, int col) {
  for (const auto& o : s.objects)
    if (o.row == row && o.col == col) return false;
  if (s.glyphs && glyph_reserves(*s.glyphs, row, col)) return false;
  return true;
}

// index of the unique object matching (color, shape); throws when absent or
// ambiguous
size_t find_unique(const SceneSpec& s, Color c, Shape sh, const char* verb) {
  std::vector<size_t> hits;
  for (size_t i = 0; i < s.objects.size(); ++i)
    if (s.objects[i].color == c && s.objects[i].shape == sh) hits.push_back(i);
  std::string desc = std::string(color_name(c)) + " " + shape_name(sh);
  if (hits.empty()) fail(std::string(verb) + ": no " + desc + " in the scene");
  if (hits.size() > 1)
    fail(std::string(verb) + ": '" + desc + "' is ambiguous (" +
         std::to_string(hits.size()) + " matches)");
  return hits[0];
}

}  // namespace

EditResult apply_edit(const SceneSpec& scene, const EditOp& op) {
  std::string why;
  check(scene.valid(&why), "apply_edit: invalid input scene: " + why);
  SceneSpec out = scene;
  std::string instruction;
  switch (op.kind) {
    case EditKind::add: {
      check(op.row >= 0 && op.row < kGrid && op.col >= 0 && op.col < kGrid,
            "add: cell out of range");
      if (!cell_free(scene, op.row, op.col))
        fail("add: cell (" + std::to_string(op.row) + "," + std::to_string(op.col) +
             ") is occupied");
      check(scene.objects.size() < 6, "add: scene already has 6 objects");
      out.objects.push_back({op.shape, op.color, op.row, op.col});
      instruction = "add a " + std::string(color_name(op.color)) + " " +
                    shape_name(op.shape) + " at " + cell_phrase(op.row, op.col);
      break;
    }
    case EditKind::remove: {
      size_t i = find_unique(scene, op.color, op.shape, "remove");
      out.objects.erase(out.objects.begin() + static_cast<long>(i));
      instruction = "remove the " + std::string(color_name(op.color)) + " " +
                    shape_name(op.shape);
      break;
    }
    case EditKind::recolor: {
      size_t i = find_unique(scene, op.color, op.shape, "recolor");
      check(op.new_color != op.color, "recolor: new color equals the old color");
      out.objects[i].color = op.new_color;
      instruction = "recolor the " + std::string(color_name(op.color)) + " " +
                    shape_name(op.shape) + " to " + color_name(op.new_color);
      break;
    }
    case EditKind::move: {
      size_t i = find_unique(scene, op.color, op.shape, "move");
      check(op.row >= 0 && op.row < kGrid && op.col >= 0 && op.col < kGrid,
            "move: cell out of range");
      if (!cell_free(scene, op.row, op.col))
        fail("move: destination cell (" + std::to_string(op.row) + "," +
             std::to_string(op.col) + ") is occupied");
      out.objects[i].row = op.row;
      out.objects[i].col = op.col;
      instruction = "move the " + std::string(color_name(op.color)) + " " +
                    shape_name(op.shape) + " to " + cell_phrase(op.row, op.col);
      break;
    }
  }
  out.normalize();
  check(out.valid(&why), "apply_edit: produced invalid scene: " + why);
  return {out, instruction};
}

std::vector<std::pair<int, int>> edited_cells(const SceneSpec& before, const EditOp& op) {
  switch (op.kind) {
    case EditKind::add:
      return {{op.row, op.col}};
    case EditKind::remove:
    case EditKind::recolor: {
      size_t i = find_unique(before, op.color, op.shape, "edited_cells");
      return {{before.objects[i].row, before.objects[i].col}};
    }
    case EditKind::move: {
      size_t i = find_unique(before, op.color, op.shape, "edited_cells");
      return {{before.objects[i].row, before.objects[i].col}, {op.row, op.col}};
    }
  }
  return {};
}

EditOp sample_edit(const SceneSpec& scene, Rng& rng) {
  // descriptors that are unique in the scene
  std::vector<size_t> unique_targets;
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    int same = 0;
    for (const auto& o : scene.objects)
      if (o.color == scene.objects[i].color && o.shape == scene.objects[i].shape) ++same;
    if (same == 1) unique_targets.push_back(i);
  }
  std::vector<std::pair<int, int>> free_cells;
  for (int r = 0; r < kGrid; ++r)
    for (int c = 0; c < kGrid; ++c)
      if (cell_free(scene, r, c)) free_cells.push_back({r, c});

  std::vector<EditKind> feasible;
  if (!free_cells.empty() && scene.objects.size() < 6) feasible.push_back(EditKind::add);
  if (!unique_targets.empty()) {
    feasible.push_back(EditKind::remove);
    feasible.push_back(EditKind::recolor);
    if (!free_cells.empty()) feasible.push_back(EditKind::move);
  }
  check(!feasible.empty(), "sample_edit: no applicable edit for this scene");
  EditKind kind = feasible[rng.uniform_index(feasible.size())];

  EditOp op;
  op.kind = kind;
  if (kind == EditKind::add) {
    // the added object's descriptor must stay unique so the instruction is
    // unambiguous when replayed
    std::vector<std::pair<Color, Shape>> unused;
    for (int c = 0; c < kColors; ++c)
      for (int s = 0; s < kShapes; ++s) {
        bool taken = false;
        for (const auto& o : scene.objects)
          if (o.color == static_cast<Color>(c) && o.shape == static_cast<Shape>(s))
            taken = true;
        if (!taken) unused.push_back({static_cast<Color>(c), static_cast<Shape>(s)});
      }
    auto [c, s] = unused[rng.uniform_index(unused.size())];
    auto [r, cc] = free_cells[rng.uniform_index(free_cells.size())];
    op.color = c;
    op.shape = s;
    op.row = r;
    op.col = cc;
  } else {
    const auto& target =
        scene.objects[unique_targets[rng.uniform_index(unique_targets.size())]];
    op.color = target.color;
    op.shape = target.shape;
    if (kind == EditKind::recolor) {
      // pick a new color that keeps the descriptor unique
      std::vector<Color> options;
      for (int c = 0; c < kColors; ++c) {
        Color nc = static_cast<Color>(c);
        if (nc == target.color) continue;
        bool clash = false;
        for (const auto& o : scene.objects)
          if (o.color == nc && o.shape == target.shape) clash = true;
        if (!clash) options.push_back(nc);
      }
      check(!options.empty(), "sample_edit: no free color for recolor");
      op.new_color = options[rng.uniform_index(options.size())];
    } else if (kind == EditKind::move) {
      auto [r, cc] = free_cells[rng.uniform_index(free_cells.size())];
      op.row = r;
      op.col = cc;
    }
  }
  return op;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

namespace {

// scenes for edit records: 1..4 objects, pairwise-distinct descriptors
SceneSpec scene_for_edit(Rng& rng) {
  int n = 1 + static_cast<int>(rng.uniform_index(4));
  SceneSpec s;
  std::vector<std::pair<int, int>> descs;
  auto cells = pick_cells(rng, n);
  for (int i = 0; i < n; ++i) {
    int c, sh;
    do {
      c = static_cast<int>(rng.uniform_index(kColors));
      sh = static_cast<int>(rng.uniform_index(kShapes));
    } while (std::find(descs.begin(), descs.end(), std::make_pair(c, sh)) != descs.end());
    descs.push_back({c, sh});
    s.objects.push_back({static_cast<Shape>(sh), static_cast<Color>(c),
                         cells[i] / kGrid, cells[i] % kGrid});
  }
  return s;
}

Category draw_category(Rng& rng, const std::array<double, kNumCategories>& mix) {
  std::vector<double> w(mix.begin(), mix.end());
  return static_cast<Category>(rng.categorical(w));
}

nlohmann::ordered_json record_to_json(const DatasetRecord& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["prompt"] = r.prompt;
  j["scene"] = scene_to_json(r.scene);
  j["image"] = r.image;
  if (!r.ref_image.empty()) j["ref_image"] = r.ref_image;
  return j;
}

}  // namespace

std::vector<DatasetRecord> make_dataset(const DatasetConfig& cfg,
                                        const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "images");
  std::vector<DatasetRecord> records;
  char name[64];

  Rng rng(Rng::mix(cfg.seed, 0xda7a));
  for (int i = 0; i < cfg.t2i; ++i) {
    Category cat = draw_category(rng, cfg.category_mix);
    auto [scene, prompt] = sample_scene(rng.next_u64(), cat);
    std::snprintf(name, sizeof(name), "images/t2i_%05d.ppm", i);
    write_ppm(render(scene), (fs::path(out_dir) / name).string());
    DatasetRecord r;
    r.task = "t2i";
    r.prompt = prompt.text;
    r.scene = scene;
    r.image = name;
    r.category = cat;
    records.push_back(r);
  }
  for (int i = 0; i < cfg.recon; ++i) {
    Category cat = draw_category(rng, cfg.category_mix);
    auto [scene, prompt] = sample_scene(rng.next_u64(), cat);
    std::snprintf(name, sizeof(name), "images/recon_%05d.ppm", i);
    write_ppm(render(scene), (fs::path(out_dir) / name).string());
    DatasetRecord r;
    r.task = "recon";
    r.prompt = kReconstructionPrompt;
    r.scene = scene;
    r.image = name;
    r.ref_image = name;  // reference equals target
    records.push_back(r);
  }
  for (int i = 0; i < cfg.edit; ++i) {
    SceneSpec ref = scene_for_edit(rng);
    EditOp op = sample_edit(ref, rng);
    EditResult res = apply_edit(ref, op);
    std::snprintf(name, sizeof(name), "images/edit_%05d_ref.ppm", i);
    std::string ref_name = name;
    write_ppm(render(ref), (fs::path(out_dir) / ref_name).string());
    std::snprintf(name, sizeof(name), "images/edit_%05d.ppm", i);
    write_ppm(render(res.scene), (fs::path(out_dir) / name).string());
    DatasetRecord r;
    r.task = "edit";
    r.prompt = res.instruction;
    r.scene = res.scene;
    r.image = name;
    r.ref_image = ref_name;
    records.push_back(r);
  }

  std::ofstream jsonl(fs::path(out_dir) / "data.jsonl", std::ios::binary);
  check(jsonl.good(), "make_dataset: cannot write to '" + out_dir + "'");
  for (const auto& r : records) jsonl << record_to_json(r).dump() << "\n";
  check(jsonl.good(), "make_dataset: write failed in '" + out_dir + "'");
  return records;
}

std::vector<DatasetRecord> load_dataset(const std::string& out_dir) {
  std::ifstream jsonl(fs::path(out_dir) / "data.jsonl");
  check(jsonl.good(), "load_dataset: missing data.jsonl in '" + out_dir + "'");
  std::vector<DatasetRecord> records;
  std::string line;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    DatasetRecord r;
    r.task = j.at("task").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.scene = scene_from_json(j.at("scene"));
    r.image = j.at("image").get<std::string>();
    if (j.contains("ref_image")) r.ref_image = j["ref_image"].get<std::string>();
    if (r.task == "t2i") r.category = parse_prompt(r.prompt).category;
    records.push_back(r);
  }
  return records;
}

}  // namespace flowgen::world
