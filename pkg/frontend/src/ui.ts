// DOM rendering for the game page. All numbers shown come from the
// service verbatim; the UI computes nothing.

import { ApiClient, Feedback, RoundPayload, StatsPayload } from "./api.js";

export function renderRound(
  root: HTMLElement,
  api: ApiClient,
  payload: RoundPayload,
  onSelect: (index: number) => void,
): void {
  root.innerHTML = "";

  const progress = document.createElement("div");
  progress.className = "progress";
  progress.textContent = `Round ${payload.index + 1} of ${payload.total}`;
  root.appendChild(progress);

  const sketch = document.createElement("img");
  sketch.className = "sketch";
  sketch.alt = "sketch";
  sketch.src = api.imageUrl(payload.sketch_url);
  root.appendChild(sketch);

  const grid = document.createElement("div");
  grid.className = "grid";
  payload.candidates.forEach((url, i) => {
    const button = document.createElement("button");
    button.className = "candidate";
    button.dataset.index = String(i);
    const img = document.createElement("img");
    img.alt = `candidate ${i + 1}`;
    img.src = api.imageUrl(url);
    button.appendChild(img);
    button.addEventListener("click", () => {
      grid
        .querySelectorAll(".candidate.selected")
        .forEach((el) => el.classList.remove("selected"));
      button.classList.add("selected");
      onSelect(i);
    });
    grid.appendChild(button);
  });
  root.appendChild(grid);

  const confirm = document.createElement("button");
  confirm.className = "confirm";
  confirm.textContent = "Confirm guess";
  confirm.disabled = true;
  root.appendChild(confirm);
}

export function enableConfirm(root: HTMLElement): void {
  const confirm = root.querySelector<HTMLButtonElement>(".confirm");
  if (confirm) confirm.disabled = false;
}

// Lock the controls and, when feedback is present, highlight the true
// target (and the wrong pick, if different).
export function showResult(
  root: HTMLElement,
  guess: number,
  feedback: Feedback | null,
): void {
  root
    .querySelectorAll<HTMLButtonElement>(".candidate, .confirm")
    .forEach((el) => (el.disabled = true));
  if (!feedback) return;
  const candidates = root.querySelectorAll<HTMLElement>(".candidate");
  candidates[feedback.target]?.classList.add("target");
  if (!feedback.correct) {
    candidates[guess]?.classList.add("wrong");
  }
  const panel = document.createElement("div");
  panel.className = "feedback " + (feedback.correct ? "correct" : "incorrect");
  panel.textContent = feedback.correct
    ? "Correct!"
    : "Not quite - the highlighted image was the target.";
  root.appendChild(panel);
}

export function showCompletion(root: HTMLElement, feedbackMode: boolean): void {
  root.innerHTML = "";
  const done = document.createElement("div");
  done.className = "completion";
  done.textContent = feedbackMode
    ? "Session complete - thank you for playing!"
    : "Session complete - thank you for playing! Your results were recorded.";
  root.appendChild(done);
}

const SETTING_COLUMNS: [string, keyof import("./api.js").SettingStats][] = [
  ["Sessions", "sessions"],
  ["Completed", "completed_sessions"],
  ["Answered", "answered"],
  ["Comm rate", "comm_rate"],
  ["Class comm rate", "class_comm_rate"],
  ["Mean ms", "mean_elapsed_ms"],
  ["P50 ms", "p50_elapsed_ms"],
  ["P90 ms", "p90_elapsed_ms"],
];

// Admin stats table: one row per game setting, values verbatim from the
// stats payload (nulls shown as a dash).
export function renderAdminTable(root: HTMLElement, stats: StatsPayload): void {
  root.innerHTML = "";
  const settings = Object.keys(stats.settings).sort();
  if (settings.length === 0) {
    const empty = document.createElement("div");
    empty.className = "empty";
    empty.textContent = "no sessions";
    root.appendChild(empty);
    return;
  }
  const table = document.createElement("table");
  table.className = "stats";
  const head = table.createTHead().insertRow();
  for (const label of ["Setting", ...SETTING_COLUMNS.map(([l]) => l)]) {
    const th = document.createElement("th");
    th.textContent = label;
    head.appendChild(th);
  }
  const body = table.createTBody();
  for (const name of settings) {
    const row = body.insertRow();
    row.insertCell().textContent = name;
    const entry = stats.settings[name];
    for (const [, key] of SETTING_COLUMNS) {
      const value = entry[key];
      row.insertCell().textContent = value === null ? "-" : String(value);
    }
  }
  root.appendChild(table);
}
