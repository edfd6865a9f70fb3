#include "bratlab/serialize.hpp"

#include <cstring>
#include <fstream>

namespace bratlab {

namespace {

constexpr char kMagic[8] = {'B', 'R', 'A', 'T', 'M', 'D', 'L', '1'};
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxExtent = 1u << 24;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw LabError("model file truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

float get_f32(std::istream& is) {
    std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

// Splits saved sections by "<prefix>." and copies payloads into an existing
// store, demanding an exact one-to-one match with the store's parameters.
void fill_store(ParamStore& store, const std::vector<NamedTensor>& sections,
                const std::string& prefix) {
    std::size_t used = 0;
    for (const auto& sec : sections) {
        if (sec.name.rfind(prefix + ".", 0) != 0) continue;
        std::string key = sec.name.substr(prefix.size() + 1);
        if (!store.has(key))
            throw LabError("model file: unexpected section '" + sec.name + "'");
        Tensor& dst = store[key];
        if (dst.shape() != sec.value.shape())
            throw LabError("model file: shape mismatch in section '" + sec.name + "'");
        std::memcpy(dst.raw(), sec.value.data(), sizeof(float) * dst.numel());
        ++used;
    }
    if (used != store.size())
        throw LabError("model file: sections missing under prefix '" + prefix + "'");
}

void dump_store(std::vector<NamedTensor>& out, const ParamStore& store, const std::string& prefix) {
    for (std::size_t i = 0; i < store.size(); ++i)
        out.push_back({prefix + "." + store.name(i), store.value(i)});
}

bool has_prefix(const std::vector<NamedTensor>& sections, const std::string& prefix) {
    for (const auto& sec : sections)
        if (sec.name.rfind(prefix + ".", 0) == 0) return true;
    return false;
}

const NamedTensor& find_section(const std::vector<NamedTensor>& sections, const std::string& name) {
    for (const auto& sec : sections)
        if (sec.name == name) return sec;
    throw LabError("model file: missing section '" + name + "'");
}

}  // namespace

void write_model_file(const std::string& path, const std::vector<NamedTensor>& sections) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw LabError("cannot open for writing: " + path);
    os.write(kMagic, 8);
    for (const auto& sec : sections) {
        if (sec.name.empty() || sec.name.size() > kMaxName)
            throw LabError("model file: bad section name");
        if (!sec.value.defined()) throw LabError("model file: undefined tensor in '" + sec.name + "'");
        put_u32(os, static_cast<std::uint32_t>(sec.name.size()));
        os.write(sec.name.data(), static_cast<std::streamsize>(sec.name.size()));
        const Shape& s = sec.value.shape();
        put_u32(os, static_cast<std::uint32_t>(s.size()));
        for (int e : s) put_u32(os, static_cast<std::uint32_t>(e));
        for (std::size_t i = 0; i < sec.value.numel(); ++i) put_f32(os, sec.value.at(i));
    }
    if (!os) throw LabError("write failed: " + path);
}

std::vector<NamedTensor> read_model_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LabError("cannot open model file: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw LabError("not a model file (bad magic): " + path);

    std::vector<NamedTensor> sections;
    while (true) {
        int peek = is.peek();
        if (peek == EOF) break;
        std::uint32_t nlen = get_u32(is);
        if (nlen == 0 || nlen > kMaxName) throw LabError("model file: bad section name length");
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        if (!is) throw LabError("model file truncated");
        std::uint32_t rank = get_u32(is);
        if (rank > kMaxRank) throw LabError("model file: bad rank in '" + name + "'");
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t e = get_u32(is);
            if (e == 0 || e > kMaxExtent) throw LabError("model file: bad extent in '" + name + "'");
            shape.push_back(static_cast<int>(e));
            numel *= e;
        }
        std::vector<float> vals(numel);
        for (std::size_t i = 0; i < numel; ++i) vals[i] = get_f32(is);
        sections.push_back({std::move(name), Tensor::from(std::move(shape), std::move(vals))});
    }
    return sections;
}

void save_model(const std::string& path, DiffusionStack& stack, ImageProbe* probe,
                JointEmbedder* joint) {
    if (!stack.vocab || !stack.vae || !stack.enc_a || !stack.enc_b || !stack.adapter)
        throw LabError("save_model: incomplete stack");
    std::vector<NamedTensor> sections;
    sections.push_back({"meta.version", Tensor::from({1}, {1.0f})});
    const auto& ns = stack.schedule;
    sections.push_back({"meta.schedule",
                        Tensor::from({3}, {static_cast<float>(ns.T), ns.betas.front(), ns.betas.back()})});
    sections.push_back({"meta.latent_scale", Tensor::from({1}, {stack.vae->latent_scale()})});
    dump_store(sections, stack.vae->params(), "vae");
    dump_store(sections, stack.enc_a->params(), "enca");
    dump_store(sections, stack.enc_b->params(), "encb");
    dump_store(sections, stack.adapter->params(), "adapter");
    if (stack.has(DenoiserKind::mini_unet))
        dump_store(sections, stack.denoiser(DenoiserKind::mini_unet).params(), "unet");
    if (stack.has(DenoiserKind::mini_dit))
        dump_store(sections, stack.denoiser(DenoiserKind::mini_dit).params(), "dit");
    if (probe) dump_store(sections, probe->params(), "probe");
    if (joint) {
        sections.push_back({"meta.joint_widths",
                            Tensor::from({2}, {static_cast<float>(joint->text_width()),
                                               static_cast<float>(joint->image_width())})});
        dump_store(sections, joint->params(), "joint");
    }
    write_model_file(path, sections);
    stack.vocab->save(path + ".vocab");
}

LoadedModel load_model(const std::string& path) {
    std::vector<NamedTensor> sections = read_model_file(path);
    const Tensor& version = find_section(sections, "meta.version").value;
    if (version.numel() != 1 || version.at(0) != 1.0f)
        throw LabError("model file: unsupported version");
    const Tensor& sched = find_section(sections, "meta.schedule").value;
    if (sched.numel() != 3) throw LabError("model file: bad schedule section");
    const Tensor& lscale = find_section(sections, "meta.latent_scale").value;

    LoadedModel out;
    DiffusionStack& stack = out.stack;
    stack.schedule = NoiseSchedule::linear(static_cast<int>(sched.at(0)), sched.at(1), sched.at(2));
    stack.vocab = std::make_unique<Vocabulary>(Vocabulary::load(path + ".vocab"));

    stack.vae = std::make_unique<VaeLite>(0);
    fill_store(stack.vae->params(), sections, "vae");
    stack.vae->set_latent_scale(lscale.at(0));

    auto enc_width = [&](const std::string& prefix) {
        return find_section(sections, prefix + ".table").value.dim(1);
    };
    stack.enc_a = std::make_unique<TextEncoder>("a", stack.vocab.get(), enc_width("enca"), 0);
    fill_store(stack.enc_a->params(), sections, "enca");
    stack.enc_b = std::make_unique<TextEncoder>("b", stack.vocab.get(), enc_width("encb"), 0);
    fill_store(stack.enc_b->params(), sections, "encb");

    const Tensor& aw = find_section(sections, "adapter.w").value;
    stack.adapter = std::make_unique<AdapterMap>(aw.dim(1), aw.dim(0), 0);
    fill_store(stack.adapter->params(), sections, "adapter");

    int cond_width = stack.enc_b->width();
    if (has_prefix(sections, "unet")) {
        auto den = make_denoiser(DenoiserKind::mini_unet, cond_width, 0);
        fill_store(den->params(), sections, "unet");
        stack.denoisers[DenoiserKind::mini_unet] = std::move(den);
    }
    if (has_prefix(sections, "dit")) {
        auto den = make_denoiser(DenoiserKind::mini_dit, cond_width, 0);
        fill_store(den->params(), sections, "dit");
        stack.denoisers[DenoiserKind::mini_dit] = std::move(den);
    }
    if (stack.denoisers.empty()) throw LabError("model file: no denoiser sections");
    stack.freeze_all();

    if (has_prefix(sections, "probe")) {
        out.probe = std::make_unique<ImageProbe>(0);
        fill_store(out.probe->params(), sections, "probe");
        out.probe->set_trained(true);
        out.probe->set_frozen(true);
    }
    if (has_prefix(sections, "joint")) {
        const Tensor& widths = find_section(sections, "meta.joint_widths").value;
        out.joint = std::make_unique<JointEmbedder>(static_cast<int>(widths.at(0)),
                                                    static_cast<int>(widths.at(1)), 0);
        fill_store(out.joint->params(), sections, "joint");
        out.joint->set_trained(true);
        out.joint->set_frozen(true);
    }
    return out;
}

}  // namespace bratlab
