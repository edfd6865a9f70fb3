#include "bratlab/toydata.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "bratlab/promptkit.hpp"

namespace fs = std::filesystem;

namespace bratlab {

namespace {

constexpr const char* kShapes[kNumShapes] = {"circle", "square", "triangle", "star"};
constexpr const char* kColors[kNumColors] = {"red",    "green",  "blue", "yellow",
                                             "purple", "orange", "cyan", "magenta"};
constexpr const char* kTextures[kNumTextures] = {"plain", "stripes", "dots"};
constexpr const char* kTextureAdj[kNumTextures] = {"plain", "striped", "dotted"};
constexpr const char* kBackgrounds[kNumBackgrounds] = {"black", "white", "gray", "brown"};
constexpr const char* kStyles[] = {"mosaic", "sketch", "neon", "blocky"};

constexpr float kColorRgb[kNumColors][3] = {
    {220, 40, 40},  {40, 200, 60},  {50, 80, 230}, {235, 220, 50},
    {150, 60, 200}, {240, 140, 40}, {60, 210, 220}, {230, 70, 200},
};
constexpr float kBackgroundRgb[kNumBackgrounds][3] = {
    {15, 15, 15}, {240, 240, 240}, {128, 128, 128}, {130, 90, 50}};

float to_unit(float byte_val) { return byte_val / 127.5f - 1.0f; }

int check_index(int i, int n, const char* what) {
    if (i < 0 || i >= n) throw LabError(std::string("bad ") + what + " index");
    return i;
}

struct Vec2 {
    float x, y;
};

// even-odd rule point-in-polygon
bool in_polygon(float px, float py, const std::vector<Vec2>& verts) {
    bool inside = false;
    const std::size_t n = verts.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = verts[i];
        const Vec2& b = verts[j];
        const bool cross = (a.y > py) != (b.y > py);
        if (cross && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) inside = !inside;
    }
    return inside;
}

std::vector<Vec2> regular_points(float cx, float cy, float r, int n, float theta) {
    std::vector<Vec2> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float a = theta + 2.0f * 3.14159265358979f * static_cast<float>(i) / static_cast<float>(n);
        out.push_back(Vec2{cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    return out;
}

}  // namespace

const char* shape_name(int i) { return kShapes[check_index(i, kNumShapes, "shape")]; }
const char* color_name(int i) { return kColors[check_index(i, kNumColors, "color")]; }
const char* texture_name(int i) { return kTextures[check_index(i, kNumTextures, "texture")]; }
const char* texture_adjective(int i) { return kTextureAdj[check_index(i, kNumTextures, "texture")]; }
const char* background_name(int i) {
    return kBackgrounds[check_index(i, kNumBackgrounds, "background")];
}

int num_styles() { return 4; }
const char* style_name(int id) { return kStyles[check_index(id, num_styles(), "style")]; }

int shape_from_name(const std::string& s) {
    for (int i = 0; i < kNumShapes; ++i) {
        if (s == kShapes[i]) return i;
    }
    throw LabError("unknown shape '" + s + "'");
}

int color_from_name(const std::string& s) {
    for (int i = 0; i < kNumColors; ++i) {
        if (s == kColors[i]) return i;
    }
    throw LabError("unknown color '" + s + "'");
}

std::string ConceptSpec::phrase() const {
    std::string out;
    if (texture != 0) {
        out += texture_adjective(texture);
        out += ' ';
    }
    out += color_name(color);
    out += ' ';
    out += shape_name(shape);
    return out;
}

std::string ConceptSpec::caption() const { return "a photo of a " + phrase(); }

std::string ConceptSpec::dir_name() const {
    std::string out = std::string(texture_adjective(texture)) + "_" + color_name(color) + "_" +
                      shape_name(shape) + "_on_" + background_name(background);
    return out;
}

bool HoldoutRule::matches(const ConceptSpec& c) const {
    if (shape && *shape != c.shape) return false;
    if (color && *color != c.color) return false;
    if (texture && *texture != c.texture) return false;
    if (background && *background != c.background) return false;
    return true;
}

Tensor render_concept(const ConceptSpec& c, int res, Rng& rng) {
    const float cx = rng.uniform(0.42f, 0.58f);
    const float cy = rng.uniform(0.42f, 0.58f);
    const float r = rng.uniform(0.26f, 0.36f);
    const float theta = rng.uniform(0.0f, 6.2831853f);
    const float tex_angle = rng.uniform(0.0f, 3.14159265f);
    const float fg_gain = rng.uniform(0.92f, 1.08f);
    const float bg_gain = rng.uniform(0.95f, 1.05f);

    std::vector<Vec2> poly;
    if (c.shape == 1) {
        poly = regular_points(cx, cy, r * 0.95f, 4, theta + 0.7853982f);
    } else if (c.shape == 2) {
        poly = regular_points(cx, cy, r, 3, theta - 1.5707963f);
    } else if (c.shape == 3) {
        poly.reserve(10);
        for (int i = 0; i < 10; ++i) {
            const float rr = (i % 2 == 0) ? r : r * 0.45f;
            const float a = theta - 1.5707963f + 3.14159265f * static_cast<float>(i) / 5.0f;
            poly.push_back(Vec2{cx + rr * std::cos(a), cy + rr * std::sin(a)});
        }
    }

    float fg[3], bg[3];
    for (int ch = 0; ch < 3; ++ch) {
        fg[ch] = std::clamp(kColorRgb[c.color][ch] * fg_gain, 0.0f, 255.0f);
        bg[ch] = std::clamp(kBackgroundRgb[c.background][ch] * bg_gain, 0.0f, 255.0f);
    }

    const float stripe_period = std::max(2.0f, static_cast<float>(res) / 10.0f) / static_cast<float>(res);
    const float dot_spacing = 4.0f / 32.0f;

    Tensor img = Tensor::zeros({3, res, res});
    float* px = img.raw();
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const float ux = (static_cast<float>(x) + 0.5f) / static_cast<float>(res);
            const float uy = (static_cast<float>(y) + 0.5f) / static_cast<float>(res);
            bool inside;
            if (c.shape == 0) {
                const float dx = ux - cx, dy = uy - cy;
                inside = dx * dx + dy * dy <= r * r * 0.81f;
            } else {
                inside = in_polygon(ux, uy, poly);
            }
            float out[3];
            if (!inside) {
                out[0] = bg[0];
                out[1] = bg[1];
                out[2] = bg[2];
            } else {
                float dim = 1.0f;
                if (c.texture == 1) {
                    const float u = ux * std::cos(tex_angle) + uy * std::sin(tex_angle);
                    const int band = static_cast<int>(std::floor(u / stripe_period));
                    if (((band % 2) + 2) % 2 == 1) dim = 0.45f;
                } else if (c.texture == 2) {
                    const float fx = ux / dot_spacing - std::floor(ux / dot_spacing);
                    const float fy = uy / dot_spacing - std::floor(uy / dot_spacing);
                    const float dx = fx - 0.5f, dy = fy - 0.5f;
                    if (dx * dx + dy * dy <= 0.09f) dim = 0.45f;
                }
                for (int ch = 0; ch < 3; ++ch) out[ch] = fg[ch] * dim;
            }
            for (int ch = 0; ch < 3; ++ch) {
                px[(static_cast<std::size_t>(ch) * res + y) * res + x] = to_unit(out[ch]);
            }
        }
    }
    return img;
}

Tensor apply_style(const Tensor& pixels, int style_id) {
    check_index(style_id, num_styles(), "style");
    if (pixels.rank() != 3 || pixels.dim(0) != 3) throw LabError("apply_style: want [3,H,W]");
    const int h = pixels.dim(1), w = pixels.dim(2);
    Tensor out = Tensor::zeros({3, h, w});
    float* o = out.raw();
    const float* p = pixels.data();
    auto idx = [&](int ch, int y, int x) {
        return (static_cast<std::size_t>(ch) * h + y) * w + x;
    };
    if (style_id == 0) {  // mosaic: 3-level quantize + grid lines
        for (int ch = 0; ch < 3; ++ch) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    float v = std::round(p[idx(ch, y, x)]);
                    if (y % 8 == 0 || x % 8 == 0) v *= 0.4f;
                    o[idx(ch, y, x)] = std::clamp(v, -1.0f, 1.0f);
                }
            }
        }
    } else if (style_id == 1) {  // sketch: grayscale + diagonal hatching
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float g = (p[idx(0, y, x)] + p[idx(1, y, x)] + p[idx(2, y, x)]) / 3.0f;
                if ((x + y) % 6 < 2) g -= 0.35f;
                g = std::clamp(g, -1.0f, 1.0f);
                for (int ch = 0; ch < 3; ++ch) o[idx(ch, y, x)] = g;
            }
        }
    } else if (style_id == 2) {  // neon: inverted rotated palette + scanlines
        for (int ch = 0; ch < 3; ++ch) {
            const int src = (ch + 1) % 3;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    float v = -p[idx(src, y, x)] * 1.3f;
                    if (y % 4 == 0) v -= 0.8f;
                    o[idx(ch, y, x)] = std::clamp(v, -1.0f, 1.0f);
                }
            }
        }
    } else {  // blocky: 4x4 pixelation with checkered block shading
        for (int ch = 0; ch < 3; ++ch) {
            for (int by = 0; by < h; by += 4) {
                for (int bx = 0; bx < w; bx += 4) {
                    float acc = 0.0f;
                    int n = 0;
                    for (int y = by; y < std::min(by + 4, h); ++y) {
                        for (int x = bx; x < std::min(bx + 4, w); ++x) {
                            acc += p[idx(ch, y, x)];
                            ++n;
                        }
                    }
                    float avg = acc / static_cast<float>(n);
                    avg += ((by / 4 + bx / 4) % 2 == 0) ? 0.25f : -0.25f;
                    avg = std::clamp(avg, -1.0f, 1.0f);
                    for (int y = by; y < std::min(by + 4, h); ++y) {
                        for (int x = bx; x < std::min(bx + 4, w); ++x) o[idx(ch, y, x)] = avg;
                    }
                }
            }
        }
    }
    return out;
}

std::vector<ImageExample> gen_corpus(std::uint64_t seed, int count,
                                     const std::vector<HoldoutRule>& holdout, int res) {
    if (count <= 0) throw LabError("gen_corpus: count must be positive");
    std::vector<ConceptSpec> allowed;
    for (int s = 0; s < kNumShapes; ++s) {
        for (int c = 0; c < kNumColors; ++c) {
            for (int t = 0; t < kNumTextures; ++t) {
                for (int b = 0; b < kNumBackgrounds; ++b) {
                    ConceptSpec spec{s, c, t, b};
                    bool excluded = false;
                    for (const auto& rule : holdout) excluded = excluded || rule.matches(spec);
                    if (!excluded) allowed.push_back(spec);
                }
            }
        }
    }
    if (allowed.empty()) throw LabError("gen_corpus: holdout excludes every concept");

    std::vector<std::string> subject_pool = get_templates(Task::subject, Phase::train).templates;
    for (const auto& t : get_templates(Task::subject, Phase::eval).templates) subject_pool.push_back(t);
    std::vector<std::string> style_pool = get_templates(Task::style, Phase::train).templates;
    for (const auto& t : get_templates(Task::style, Phase::eval).templates) style_pool.push_back(t);

    Rng rng(seed);
    std::vector<ImageExample> out;
    out.reserve(static_cast<std::size_t>(count));
    std::size_t subj_cursor = 0, style_cursor = 0;
    for (int i = 0; i < count; ++i) {
        ImageExample ex;
        const ConceptSpec spec = allowed[rng.uniform_int(allowed.size())];
        ex.pixels = render_concept(spec, res, rng);
        ex.spec = spec;
        if (i % 4 == 3) {
            ex.style_id = static_cast<int>(rng.uniform_int(static_cast<std::size_t>(num_styles())));
            ex.pixels = apply_style(ex.pixels, ex.style_id);
            ex.caption = render_template(style_pool[style_cursor++ % style_pool.size()],
                                         style_name(ex.style_id));
        } else {
            ex.caption =
                render_template(subject_pool[subj_cursor++ % subject_pool.size()], spec.phrase());
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<ImageExample> gen_subject_instances(const ConceptSpec& c, int n, std::uint64_t seed,
                                                int res) {
    if (n < 1) throw LabError("gen_subject_instances: n must be >= 1");
    Rng rng(seed);
    std::vector<ImageExample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ImageExample ex;
        ex.pixels = render_concept(c, res, rng);
        ex.caption = c.caption();
        ex.spec = c;
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<ImageExample> gen_style_instances(int style_id, int n, std::uint64_t seed, int res) {
    if (n < 1) throw LabError("gen_style_instances: n must be >= 1");
    Rng rng(seed);
    std::vector<ImageExample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ConceptSpec spec{static_cast<int>(rng.uniform_int(kNumShapes)),
                         static_cast<int>(rng.uniform_int(kNumColors)),
                         static_cast<int>(rng.uniform_int(kNumTextures)),
                         static_cast<int>(rng.uniform_int(kNumBackgrounds))};
        ImageExample ex;
        ex.pixels = apply_style(render_concept(spec, res, rng), style_id);
        ex.caption = std::string("a painting, art by ") + style_name(style_id);
        ex.style_id = style_id;
        out.push_back(std::move(ex));
    }
    return out;
}

std::string normalize_label(const std::string& label) {
    if (label.empty()) throw LabError("empty label");
    std::string lower;
    for (char c : label) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    std::string last;
    std::string cur;
    for (char c : lower) {
        if (c == '_') {
            if (!cur.empty()) last = cur;
            cur.clear();
        } else if (!std::isdigit(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) last = cur;
    if (last.empty()) throw LabError("label '" + label + "' reduces to nothing");
    return last;
}

void save_ppm(const std::string& path, const Tensor& pixels) {
    if (pixels.rank() != 3 || pixels.dim(0) != 3) throw LabError("save_ppm: want [3,H,W]");
    const int h = pixels.dim(1), w = pixels.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LabError("cannot write " + path);
    out << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                const float v = pixels.at((static_cast<std::size_t>(ch) * h + y) * w + x);
                const float b = std::round(std::clamp(v, -1.0f, 1.0f) * 127.5f + 127.5f);
                row[static_cast<std::size_t>(x) * 3 + ch] =
                    static_cast<unsigned char>(std::clamp(b, 0.0f, 255.0f));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw LabError("short write to " + path);
}

namespace {

int next_ppm_int(std::istream& in) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw LabError("truncated ppm header");
    int val = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        val = val * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw LabError("malformed ppm header");
    return val;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LabError("cannot read " + path);
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') throw LabError(path + ": not a P6 ppm");
    const int w = next_ppm_int(in);
    const int h = next_ppm_int(in);
    const int maxval = next_ppm_int(in);
    if (maxval != 255) throw LabError(path + ": unsupported maxval");
    if (w <= 0 || h <= 0) throw LabError(path + ": bad dimensions");
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw LabError(path + ": truncated pixel data");
    }
    Tensor img = Tensor::zeros({3, h, w});
    float* px = img.raw();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                px[(static_cast<std::size_t>(ch) * h + y) * w + x] =
                    to_unit(static_cast<float>(raw[(static_cast<std::size_t>(y) * w + x) * 3 + ch]));
            }
        }
    }
    return img;
}

Tensor pad_and_resize(const Tensor& pixels, int res) {
    if (pixels.rank() != 3 || pixels.dim(0) != 3) throw LabError("pad_and_resize: want [3,H,W]");
    const int h = pixels.dim(1), w = pixels.dim(2);
    const int side = std::max(h, w);
    Tensor sq = Tensor::zeros({3, side, side});
    float* sp = sq.raw();
    const int oy = (side - h) / 2, ox = (side - w) / 2;
    for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                sp[(static_cast<std::size_t>(ch) * side + y + oy) * side + x + ox] =
                    pixels.at((static_cast<std::size_t>(ch) * h + y) * w + x);
            }
        }
    }
    if (side == res) return sq;
    Tensor out = Tensor::zeros({3, res, res});
    float* op = out.raw();
    const float scale = static_cast<float>(side) / static_cast<float>(res);
    for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < res; ++y) {
            const float sy = std::clamp((static_cast<float>(y) + 0.5f) * scale - 0.5f, 0.0f,
                                        static_cast<float>(side - 1));
            const int y0 = static_cast<int>(sy);
            const int y1 = std::min(y0 + 1, side - 1);
            const float fy = sy - static_cast<float>(y0);
            for (int x = 0; x < res; ++x) {
                const float sx = std::clamp((static_cast<float>(x) + 0.5f) * scale - 0.5f, 0.0f,
                                            static_cast<float>(side - 1));
                const int x0 = static_cast<int>(sx);
                const int x1 = std::min(x0 + 1, side - 1);
                const float fx = sx - static_cast<float>(x0);
                auto at = [&](int yy, int xx) {
                    return sq.at((static_cast<std::size_t>(ch) * side + yy) * side + xx);
                };
                const float v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
                op[(static_cast<std::size_t>(ch) * res + y) * res + x] = v;
            }
        }
    }
    return out;
}

std::vector<ImageExample> load_folder(const std::string& path, int res) {
    if (!fs::is_directory(path)) throw LabError(path + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw LabError("no .ppm files in " + path);
    std::vector<ImageExample> out;
    for (const auto& f : files) {
        ImageExample ex;
        try {
            ex.pixels = pad_and_resize(load_ppm(f.string()), res);
        } catch (const LabError& e) {
            std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
            continue;
        }
        fs::path sidecar = f;
        sidecar.replace_extension(".txt");
        if (fs::exists(sidecar)) {
            std::ifstream in(sidecar, std::ios::binary);
            std::getline(in, ex.caption);
            if (!ex.caption.empty() && ex.caption.back() == '\r') ex.caption.pop_back();
        }
        out.push_back(std::move(ex));
    }
    if (out.empty()) throw LabError("no decodable images in " + path);
    return out;
}

void save_dataset(const std::string& dir, const std::vector<ImageExample>& examples) {
    fs::create_directories(dir);
    char name[32];
    for (std::size_t i = 0; i < examples.size(); ++i) {
        std::snprintf(name, sizeof(name), "%03zu", i);
        save_ppm(dir + "/" + name + ".ppm", examples[i].pixels);
        std::ofstream cap(dir + "/" + name + ".txt", std::ios::binary);
        cap << examples[i].caption << '\n';
    }
}

std::vector<std::string> corpus_vocab_texts() {
    std::vector<std::string> texts;
    for (Task task : {Task::subject, Task::style}) {
        for (Phase phase : {Phase::train, Phase::eval}) {
            for (const auto& t : get_templates(task, phase).templates) texts.push_back(t);
        }
    }
    std::string shapes, colors, textures, styles;
    for (int i = 0; i < kNumShapes; ++i) shapes += std::string(kShapes[i]) + " ";
    for (int i = 0; i < kNumColors; ++i) colors += std::string(kColors[i]) + " ";
    for (int i = 0; i < kNumTextures; ++i) textures += std::string(kTextureAdj[i]) + " ";
    for (int i = 0; i < num_styles(); ++i) styles += std::string(kStyles[i]) + " ";
    texts.push_back(shapes);
    texts.push_back(colors);
    texts.push_back(textures);
    texts.push_back(styles);
    return texts;
}

}  // namespace bratlab
