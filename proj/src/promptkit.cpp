#include "bratlab/promptkit.hpp"

#include <fstream>

#include "bratlab/util.hpp"

namespace bratlab {

namespace {

int placeholder_count(const std::string& t) {
    int n = 0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        if (t[i] == '{' && t[i + 1] == '}') ++n;
    }
    return n;
}

void validate_set(const TemplateSet& set, const std::string& origin) {
    if (set.templates.empty()) throw LabError("empty template set: " + origin);
    for (const auto& t : set.templates) {
        if (placeholder_count(t) != 1) {
            throw LabError("template must contain exactly one {}: \"" + t + "\" (" + origin + ")");
        }
    }
}

TemplateSet make_set(Task task, Phase phase, std::vector<std::string> templates) {
    TemplateSet set{task, phase, std::move(templates)};
    validate_set(set, "builtin");
    return set;
}

}  // namespace

const char* task_name(Task t) { return t == Task::subject ? "subject" : "style"; }

Task task_from_name(const std::string& s) {
    if (s == "subject") return Task::subject;
    if (s == "style") return Task::style;
    throw LabError("unknown task '" + s + "'");
}

const TemplateSet& get_templates(Task task, Phase phase) {
    static const TemplateSet subject_train = make_set(
        Task::subject, Phase::train,
        {
            "a photo of a {}",
            "a rendering of a {}",
            "a cropped photo of the {}",
            "the photo of a {}",
            "a photo of a clean {}",
            "a photo of a dirty {}",
            "a dark photo of the {}",
            "a photo of my {}",
            "a photo of the cool {}",
            "a close-up photo of a {}",
            "a bright photo of the {}",
            "a cropped photo of a {}",
            "a photo of the {}",
            "a good photo of the {}",
            "a photo of one {}",
            "a close-up photo of the {}",
            "a rendition of the {}",
            "a photo of the clean {}",
            "a rendition of a {}",
            "a photo of a nice {}",
            "a good photo of a {}",
            "a photo of the nice {}",
            "a photo of the small {}",
            "a photo of the weird {}",
            "a photo of the large {}",
            "a photo of a cool {}",
            "a photo of a small {}",
        });
    static const TemplateSet style_train = make_set(
        Task::style, Phase::train,
        {
            "a painting, art by {}",
            "a rendering, art by {}",
            "a cropped painting, art by {}",
            "the painting, art by {}",
            "a clean image, art by {}",
            "a dirty image, art by {}",
            "a dark image, art by {}",
            "an image, art by {}",
            "a cool picture, art by {}",
            "a close-up picture, art by {}",
            "a bright picture, art by {}",
            "a cropped picture, art by {}",
            "a good painting, art by {}",
            "a close-up painting, art by {}",
            "a rendition, art by {}",
            "a nice painting, in the style of {}",
            "a small painting, in the style of {}",
            "a weird painting, in the style of {}",
            "a large painting, in the style of {}",
        });
    static const TemplateSet subject_eval = make_set(
        Task::subject, Phase::eval,
        {
            "a photo of {} at the beach",
            "a photo of {} in the jungle",
            "a photo of {} in the snow",
            "a photo of {} in the street",
            "a photo of {} with a city in the background",
            "a photo of {} with a mountain in the background",
            "a photo of {} with the Eiffel Tower in the background",
            "a photo of {} near the Statue of Liberty",
            "a photo of {} near the Sydney Opera House",
            "a photo of {} floating on top of water",
            "a photo of {} eating a burger",
            "a photo of {} drinking a beer",
            "a photo of {} wearing a blue hat",
            "a photo of {} wearing sunglasses",
            "a photo of {} playing with a ball",
            "a photo of {} as a police officer",
        });
    static const TemplateSet style_eval = make_set(
        Task::style, Phase::eval,
        {
            "the beach, art by {}",
            "the jungle, art by {}",
            "the snow, art by {}",
            "the street, art by {}",
            "a person with a city in the background, art by {}",
            "a person with a mountain in the background, art by {}",
            "the Eiffel Tower, art by {}",
            "the Statue of Liberty, art by {}",
            "the Sydney Opera House, art by {}",
            "person floating on top of water, art by {}",
            "eating a burger, art by {}",
            "drinking a beer, art by {}",
            "wearing a blue hat, art by {}",
            "wearing sunglasses, art by {}",
            "playing with a ball, art by {}",
            "a police officer, art by {}",
        });
    if (task == Task::subject) return phase == Phase::train ? subject_train : subject_eval;
    return phase == Phase::train ? style_train : style_eval;
}

const std::string& sample_template(const TemplateSet& set, Rng& rng) {
    if (set.templates.empty()) throw LabError("empty template set");
    return set.templates[rng.uniform_int(set.templates.size())];
}

std::string render_template(const std::string& tmpl, const std::string& tokens) {
    if (placeholder_count(tmpl) != 1) {
        throw LabError("template must contain exactly one {}: \"" + tmpl + "\"");
    }
    const std::size_t pos = tmpl.find("{}");
    return tmpl.substr(0, pos) + tokens + tmpl.substr(pos + 2);
}

TemplateSet load_template_file(const std::string& path, Task task, Phase phase) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LabError("cannot read template file " + path);
    TemplateSet set{task, phase, {}};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        set.templates.push_back(line);
    }
    validate_set(set, path);
    return set;
}

}  // namespace bratlab
