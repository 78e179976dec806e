// Entry point: routes between the player page (/#/session/<token>) and
// the admin dashboard (/#/admin), wiring the state machine to the DOM.

import { ApiClient, GuessResponse } from "./api.js";
import { SessionPlayer } from "./session.js";
import {
  enableConfirm,
  renderAdminTable,
  renderRound,
  showCompletion,
  showResult,
} from "./ui.js";

export function tokenFromLocation(hash: string): string | null {
  const match = /#\/session\/([A-Za-z0-9_-]+)/.exec(hash);
  return match ? match[1] : null;
}

// Render the player's current round and resolve once their confirmed
// guess has been accepted by the server (feedback shown when provided).
export function playRoundInteractive(
  root: HTMLElement,
  player: SessionPlayer,
): Promise<GuessResponse> {
  const round = player.round;
  if (!round) throw new Error("no round loaded");
  return new Promise((resolve, reject) => {
    renderRound(root, player.api, round.payload, (i) => {
      player.select(i);
      enableConfirm(root);
    });
    const confirm = root.querySelector<HTMLButtonElement>(".confirm");
    confirm?.addEventListener("click", () => {
      if (round.selected === null) return;
      player.confirm().then((result) => {
        showResult(root, round.selected ?? 0, result.feedback);
        resolve(result);
      }, reject);
    });
  });
}

const FEEDBACK_PAUSE_MS = 1200;

export async function runSession(
  root: HTMLElement,
  player: SessionPlayer,
  feedbackPauseMs: number = FEEDBACK_PAUSE_MS,
): Promise<void> {
  let index = 0;
  for (;;) {
    const round = await player.loadRound(index);
    const result = await playRoundInteractive(root, player);
    if (player.complete) {
      if (result.feedback) await delay(feedbackPauseMs);
      showCompletion(root, round.payload.feedback_mode);
      return;
    }
    if (result.feedback) await delay(feedbackPauseMs);
    index += 1;
  }
}

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export async function runAdmin(
  root: HTMLElement,
  api: ApiClient,
  adminToken: string,
): Promise<void> {
  try {
    const stats = await api.getStats(adminToken);
    renderAdminTable(root, stats);
  } catch {
    root.textContent = "Not authorized.";
  }
}

function boot(): void {
  const root = document.getElementById("app");
  if (!root) return;
  const api = new ApiClient("");
  const token = tokenFromLocation(window.location.hash);
  if (token) {
    void runSession(root, new SessionPlayer(api, token));
  } else if (window.location.hash.startsWith("#/admin")) {
    const adminToken = window.prompt("Admin token") ?? "";
    void runAdmin(root, api, adminToken);
  } else {
    root.textContent = "Open your session link to play.";
  }
}

if (typeof window !== "undefined" && "document" in globalThis) {
  window.addEventListener("DOMContentLoaded", boot);
}
